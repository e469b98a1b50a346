"""Synthetic data with exact first and second moments.

The Gaussian generator is the workhorse: the model is second-moment
specified, so Y = M + L z (L the Cholesky factor of C) reproduces the
joint mean and covariance exactly. Count generators exist only to
exercise the overdispersed marginal variance, not any joint law.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .estfun import assemble_joint
from .functions import link_inverse


@dataclass(frozen=True)
class SimSpec:
    model: object
    theta_true: object
    n_replicates: int
    seed: int


def stacked_mean(model, theta):
    """Stacked mean vector M at theta."""
    N = model.N
    mean = np.empty(N * model.R)
    for r, (resp, sl) in enumerate(zip(model.responses, model.beta_slices())):
        eta = resp.design @ theta.beta[sl]
        mean[r * N : (r + 1) * N] = link_inverse(resp.link, eta)
    return mean


def simulate_gaussian(spec):
    """Replicates of M + L z with z standard normal; rows are replicates.

    Per-replicate generators are spawned from one seed sequence, so the
    output is reproducible and replicates stay independent regardless
    of how many are drawn.
    """
    model = spec.model
    mean = stacked_mean(model, spec.theta_true)
    assembly = assemble_joint(model, np.zeros_like(mean), spec.theta_true)
    L = assembly.C_chol
    n = mean.size
    out = np.empty((spec.n_replicates, n))
    children = np.random.SeedSequence(spec.seed).spawn(spec.n_replicates)
    for i, child in enumerate(children):
        z = np.random.default_rng(child).standard_normal(n)
        out[i] = mean + L @ z
    return out


def simulate_counts_marginal(mu, p, tau0, kind="poisson_tweedie", seed=0):
    """Independent counts with mean mu and variance mu + tau0 * mu^p.

    p = 1 uses Poisson clustering (Neyman Type A), p = 2 gamma mixing
    (negative binomial). Other powers have no simple mixing
    construction and are rejected.
    """
    if kind != "poisson_tweedie":
        raise DomainError(f"unsupported count kind {kind!r}")
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    if np.any(mu <= 0) or tau0 <= 0:
        raise DomainError("require mu > 0 and tau0 > 0")
    rng = np.random.default_rng(seed)
    if p == 1:
        clusters = rng.poisson(mu / tau0)
        return rng.poisson(tau0 * clusters)
    if p == 2:
        lam = rng.gamma(shape=1.0 / tau0, scale=tau0 * mu)
        return rng.poisson(lam)
    raise DomainError(f"unsupported power {p} for count simulation")
