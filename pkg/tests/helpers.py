"""Shared fixtures-in-code for the test suite: random instances and oracles."""

import numpy as np

from mcglm import (
    CovLinkSpec,
    LinkSpec,
    MatrixPredictor,
    ModelSpec,
    ResponseSpec,
    VarianceSpec,
    mat_compound_symmetry,
    mat_identity,
    make_theta,
)


def random_pd(rng, n, jitter=None):
    """Random symmetric positive definite matrix."""
    A = rng.standard_normal((n, n))
    M = A @ A.T
    if jitter is None:
        jitter = 0.5 * n
    return M + jitter * np.eye(n)


def random_symmetric(rng, n):
    A = rng.standard_normal((n, n))
    return 0.5 * (A + A.T)


def central_diff(f, x, h=1e-6):
    """Central finite difference of a scalar-argument function."""
    return (f(x + h) - f(x - h)) / (2.0 * h)


def rel_err(analytic, reference):
    scale = max(float(np.max(np.abs(reference))), 1e-8)
    return float(np.max(np.abs(np.asarray(analytic) - np.asarray(reference)))) / scale


_LINKS = ["identity", "log"]
_SETUPS = [
    ("constant", "identity", True),
    ("constant", "inverse", True),
    ("tweedie_power", "identity", False),
    ("tweedie_power", "identity", True),
    ("poisson_tweedie", "identity", False),
]


def random_instance(rng, N=None, R=None, free_rho=True):
    """Random small McGLM instance: (model, y, theta) with PD covariance.

    Mixes variance kinds, covariance links and predictors across
    responses; theta is drawn well inside the PD region.
    """
    if N is None:
        N = int(rng.integers(4, 13))
    if R is None:
        R = int(rng.integers(1, 4))
    responses = []
    betas, taus, powers = [], [], []
    groups = rng.integers(0, max(2, N // 3), size=N)
    for r in range(R):
        kind, cov, power_known = _SETUPS[rng.integers(0, len(_SETUPS))]
        link = "log" if kind in ("tweedie_power", "poisson_tweedie") else "identity"
        k = int(rng.integers(1, 4))
        X = np.column_stack([np.ones(N)] + [rng.standard_normal(N) for _ in range(k - 1)])
        comps = [mat_identity(N)]
        if cov == "identity" and rng.random() < 0.5:
            comps.append(mat_compound_symmetry(groups))
        pred = MatrixPredictor(tuple(comps))
        p_val = float(rng.uniform(1.1, 1.9)) if kind != "constant" else 1.0
        responses.append(
            ResponseSpec(
                f"y{r}",
                LinkSpec(link),
                VarianceSpec(kind, power_known=power_known),
                CovLinkSpec(cov),
                X,
                pred,
                power_value=p_val,
            )
        )
        beta = np.zeros(k)
        beta[0] = 0.8 if link == "log" else float(rng.uniform(-1, 1))
        beta[1:] = 0.2 * rng.standard_normal(k - 1)
        betas.append(beta)
        tau = np.zeros(len(comps))
        tau[0] = float(rng.uniform(0.8, 2.0))
        if len(comps) > 1:
            tau[1] = float(rng.uniform(0.05, 0.3)) * tau[0]
        taus.append(tau)
        powers.append(p_val)
    rho = rng.uniform(-0.25, 0.25, size=R * (R - 1) // 2)
    model = ModelSpec(tuple(responses), rho_fixed=None if free_rho else rho)
    lam = model.pack_lambda(rho, np.array(powers), taus)
    beta = np.concatenate(betas)
    theta = make_theta(model, beta, lam)
    y = np.abs(rng.standard_normal(N * R)) + 0.5  # admissible for log-link families
    return model, y, theta


def gaussian_two_response(N=20, seed=0, rho=0.4, tau_cs=0.3):
    """R=2 Gaussian model with compound-symmetry predictors; returns (model, theta)."""
    rng = np.random.default_rng(seed)
    groups = np.repeat(np.arange(N // 2), 2)
    responses = []
    betas, taus = [], []
    for r in range(2):
        X = np.column_stack([np.ones(N), rng.standard_normal(N)])
        pred = MatrixPredictor((mat_identity(N), mat_compound_symmetry(groups)))
        responses.append(
            ResponseSpec(
                f"y{r}",
                LinkSpec("identity"),
                VarianceSpec("constant"),
                CovLinkSpec("identity"),
                X,
                pred,
            )
        )
        betas.append(np.array([1.0 + r, 0.5 - 0.2 * r]))
        taus.append(np.array([1.0 + 0.5 * r, tau_cs]))
    model = ModelSpec(tuple(responses))
    lam = model.pack_lambda([rho], [1.0, 1.0], taus)
    return model, make_theta(model, np.concatenate(betas), lam)
