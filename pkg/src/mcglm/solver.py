"""Newton-scoring solver: chaser and reciprocal (step-damped) iterations.

The beta update is a quasi-score Newton step; the lambda update solves
the (optionally bias-corrected) Pearson equations. When a proposal
leads to a non-positive-definite covariance, the reciprocal variant
damps the lambda step by a tuning constant that is escalated in small
increments and reset to zero after every successful step.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConvergenceError,
    DomainError,
    FactorizationError,
    StepFailureError,
)
from .estfun import (
    bias_correction,
    build_godambe,
    build_state,
    empirical_k4,
    pearson_vector,
    quasi_score,
    sensitivity_beta,
    sensitivity_lambda,
    variability_lambda,
)
from .functions import link_inverse, link_inverse_deriv, variance_eval
from .model import make_theta


@dataclass(frozen=True)
class SolverOptions:
    algorithm: str = "chaser"          # chaser | reciprocal
    tol_score: float = 1e-6            # max-abs estimating function
    tol_param: float = 1e-8            # max-abs parameter change
    max_iter: int = 200
    alpha_step: float = 0.01
    alpha_max: float = 1.0
    correct_pearson: bool = True

    def __post_init__(self):
        if self.algorithm not in ("chaser", "reciprocal"):
            raise DomainError(f"unknown algorithm {self.algorithm!r}")
        if self.tol_score <= 0 or self.tol_param <= 0:
            raise DomainError("tolerances must be positive")
        if not 0.0 < self.alpha_step <= self.alpha_max:
            raise DomainError("require 0 < alpha_step <= alpha_max")


@dataclass(frozen=True)
class IterationRecord:
    theta: np.ndarray
    score_norm: float
    alpha: float


@dataclass(frozen=True)
class FitResult:
    theta_hat: object
    godambe: object
    std_errors: np.ndarray
    trace: tuple
    converged: bool
    n_iter: int
    n_alpha_escalations: int
    fitted: np.ndarray = field(default=None, repr=False)
    saturated: bool = False

    def summary_names(self, model):
        return model.parameter_names()


def _corrected_pearson(state, correct):
    psi = pearson_vector(state)
    if correct:
        psi = psi + bias_correction(state)
    return psi


def _beta_update(state):
    S_b = sensitivity_beta(state)
    return state.theta.beta - np.linalg.solve(S_b, quasi_score(state))


def _lambda_update(state, alpha, correct):
    psi = _corrected_pearson(state, correct)
    S_l = sensitivity_lambda(state)
    if alpha == 0.0:
        M = S_l
    else:
        k4 = empirical_k4(state.residual, state.assembly.C)
        V_l = variability_lambda(state, k4)
        M = alpha * float(psi @ psi) * np.linalg.solve(V_l, S_l) + S_l
    try:
        step = np.linalg.solve(M, psi)
    except np.linalg.LinAlgError as exc:
        raise StepFailureError(f"singular lambda-step matrix: {exc}")
    return state.theta.lam - step


def chaser_step(theta, model, y, correct=True):
    """One modified-chaser update: beta first, then lambda at the new beta."""
    return reciprocal_step(theta, model, y, alpha=0.0, correct=correct)


def reciprocal_step(theta, model, y, alpha, correct=True):
    """One damped update; alpha = 0 reduces exactly to the chaser step."""
    state = build_state(model, y, theta)
    beta_new = _beta_update(state)
    state_b = build_state(model, y, theta.with_beta(beta_new))
    lam_new = _lambda_update(state_b, alpha, correct)
    return make_theta(model, beta_new, lam_new)


def alpha_strategy(previous_alpha, proposal_outcome, eps=0.01, alpha_max=1.0):
    """Escalate the tuning constant on PD failure, reset to zero on success."""
    if proposal_outcome == "pd_ok":
        return 0.0
    if proposal_outcome != "pd_fail":
        raise DomainError(f"unknown outcome {proposal_outcome!r}")
    if previous_alpha >= alpha_max:
        raise ConvergenceError(
            "tuning constant reached its cap without a positive-definite "
            "proposal; consider rescaling the data or different starting values"
        )
    return min(previous_alpha + eps, alpha_max)


def initialize(model, y, irls_iter=10):
    """Starting values from independent per-response quasi-GLM fits.

    Each response is fitted with an iid working covariance; tau_0 comes
    from the mean squared Pearson residual (its reciprocal under the
    inverse covariance link), remaining tau are zero, rho is zero, and
    the power starts at 1 (tweedie) or 1.5 (poisson_tweedie).
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    N = model.N
    betas, taus, powers = [], [], []
    for r, resp in enumerate(model.responses):
        y_r = y[r * N : (r + 1) * N]
        X = resp.design
        if resp.power_free:
            p0 = 1.5 if resp.variance.kind == "poisson_tweedie" else 1.0
        else:
            p0 = resp.power_value
        beta = _irls_single(y_r, X, resp, p0, irls_iter)
        eta = X @ beta
        mu = link_inverse(resp.link, eta)
        vfun = variance_eval(resp.variance, mu, p0)
        if resp.variance.kind == "poisson_tweedie":
            tau0 = float(np.mean(((y_r - mu) ** 2 - mu) / vfun))
            tau0 = max(tau0, 1e-2)
        else:
            tau0 = float(np.mean((y_r - mu) ** 2 / vfun))
            tau0 = max(tau0, 1e-10)
        if resp.covlink.kind == "inverse":
            tau0 = 1.0 / tau0
        tau = np.zeros(resp.predictor.D_plus_1)
        tau[0] = tau0
        betas.append(beta)
        taus.append(tau)
        powers.append(p0)
    rho = np.zeros(model.n_rho)
    lam = model.pack_lambda(rho, np.array(powers), taus)
    return make_theta(model, np.concatenate(betas), lam)


def _irls_single(y_r, X, resp, p0, irls_iter):
    n, k = X.shape
    beta = np.zeros(k)
    # crude mean start on the link scale
    ybar = float(np.mean(y_r))
    if resp.link.kind == "log":
        start = np.log(max(ybar, 1e-8))
    elif resp.link.kind == "logit":
        yb = min(max(ybar, 1e-6), 1 - 1e-6)
        start = np.log(yb / (1 - yb))
    else:
        start = ybar
    const = np.flatnonzero(np.all(X == X[:1, :], axis=0) & (X[0] != 0))
    if const.size:
        beta[const[0]] = start / X[0, const[0]]
    for _ in range(irls_iter):
        eta = X @ beta
        mu = link_inverse(resp.link, eta)
        d = link_inverse_deriv(resp.link, eta)
        v = variance_eval(resp.variance, mu, p0)
        if resp.variance.kind == "poisson_tweedie":
            v = v + mu
        w = d ** 2 / v
        z = eta + (y_r - mu) / d
        XtW = X.T * w
        try:
            beta = np.linalg.solve(XtW @ X, XtW @ z)
        except np.linalg.LinAlgError:
            raise StepFailureError(
                f"degenerate single-response fit for {resp.name!r}"
            )
    if not np.all(np.isfinite(beta)):
        raise StepFailureError(f"degenerate single-response fit for {resp.name!r}")
    return beta


def fit(model, y, opts=None):
    """Iterate to a joint root of the quasi-score and Pearson functions.

    Convergence requires both the max-abs estimating function and the
    max-abs parameter change to fall below their tolerances. The final
    state feeds the Godambe sandwich for standard errors.
    """
    if opts is None:
        opts = SolverOptions()
    y = np.asarray(y, dtype=float).reshape(-1)
    theta = initialize(model, y)
    trace = []
    n_escalations = 0
    alpha = 0.0
    converged = False
    state = build_state(model, y, theta)
    prev_flat = None
    n_iter = 0

    for n_iter in range(1, opts.max_iter + 1):
        psi_b = quasi_score(state)
        psi_l = _corrected_pearson(state, opts.correct_pearson)
        score_norm = max(
            float(np.max(np.abs(psi_b))) if psi_b.size else 0.0,
            float(np.max(np.abs(psi_l))) if psi_l.size else 0.0,
        )
        trace.append(IterationRecord(theta.flat.copy(), score_norm, alpha))
        if (
            prev_flat is not None
            and score_norm < opts.tol_score
            and float(np.max(np.abs(theta.flat - prev_flat))) < opts.tol_param
        ):
            converged = True
            break
        prev_flat = theta.flat

        beta_new = _beta_update(state)
        try:
            state_b = build_state(model, y, theta.with_beta(beta_new))
        except FactorizationError as exc:
            raise StepFailureError(f"non-PD covariance after beta step: {exc}")

        while True:
            lam_new = _lambda_update(state_b, alpha, opts.correct_pearson)
            theta_new = make_theta(model, beta_new, lam_new)
            try:
                state_new = build_state(model, y, theta_new)
            except FactorizationError as exc:
                if opts.algorithm == "chaser":
                    raise StepFailureError(
                        f"chaser proposal gives non-PD covariance: {exc}"
                    )
                alpha = alpha_strategy(
                    alpha, "pd_fail", eps=opts.alpha_step, alpha_max=opts.alpha_max
                )
                n_escalations += 1
                continue
            alpha = alpha_strategy(alpha, "pd_ok")
            break
        theta = theta_new
        state = state_new

    god = build_godambe(state)
    saturated = False
    slices = model.beta_slices()
    for r, resp in enumerate(model.responses):
        _, sat = link_inverse(
            resp.link, resp.design @ theta.beta[slices[r]], return_saturation=True
        )
        saturated = saturated or sat
    return FitResult(
        theta_hat=theta,
        godambe=god,
        std_errors=god.std_errors,
        trace=tuple(trace),
        converged=converged,
        n_iter=n_iter,
        n_alpha_escalations=n_escalations,
        fitted=state.mu.copy(),
        saturated=saturated,
    )
