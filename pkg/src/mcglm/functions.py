"""Link, variance and covariance-link functions with their derivatives.

Everything here is a pure function of its inputs; the specs are small
frozen dataclasses so they can be shared freely.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve
from scipy.linalg.lapack import dpotrf

from .errors import DomainError, FactorizationError

LINK_KINDS = ("identity", "log", "logit")
VARIANCE_KINDS = ("constant", "tweedie_power", "poisson_tweedie", "binomial")
COVLINK_KINDS = ("identity", "inverse")

# |eta| clamp for the logit link; avoids exact 0/1 fitted values that
# break the binomial variance.
LOGIT_ETA_BOUND = 30.0
# exp overflow guard for the log link.
LOG_ETA_BOUND = 700.0


@dataclass(frozen=True)
class LinkSpec:
    """Mean link function g; kind in {identity, log, logit}."""

    kind: str

    def __post_init__(self):
        if self.kind not in LINK_KINDS:
            raise DomainError(f"unknown link kind {self.kind!r}")


@dataclass(frozen=True)
class VarianceSpec:
    """Variance function; kind in {constant, tweedie_power, poisson_tweedie, binomial}.

    ``power_known`` marks whether the power parameter is fixed by the user
    or estimated; it is ignored by kinds without a power parameter.
    """

    kind: str
    power_known: bool = True

    def __post_init__(self):
        if self.kind not in VARIANCE_KINDS:
            raise DomainError(f"unknown variance kind {self.kind!r}")

    @property
    def has_power(self):
        return self.kind in ("tweedie_power", "poisson_tweedie")


@dataclass(frozen=True)
class CovLinkSpec:
    """Covariance link function h; kind in {identity, inverse}."""

    kind: str

    def __post_init__(self):
        if self.kind not in COVLINK_KINDS:
            raise DomainError(f"unknown covariance link kind {self.kind!r}")


def link_inverse(link, eta, return_saturation=False):
    """Inverse link mu = g^{-1}(eta), elementwise.

    The log and logit links saturate at large |eta| instead of
    overflowing; pass ``return_saturation=True`` to also get a flag
    telling whether any entry was clamped.
    """
    eta = np.asarray(eta, dtype=float)
    saturated = False
    if link.kind == "identity":
        mu = eta.copy()
    elif link.kind == "log":
        saturated = bool(np.any(np.abs(eta) > LOG_ETA_BOUND))
        mu = np.exp(np.clip(eta, -LOG_ETA_BOUND, LOG_ETA_BOUND))
    else:  # logit
        saturated = bool(np.any(np.abs(eta) > LOGIT_ETA_BOUND))
        e = np.clip(eta, -LOGIT_ETA_BOUND, LOGIT_ETA_BOUND)
        mu = 1.0 / (1.0 + np.exp(-e))
    if return_saturation:
        return mu, saturated
    return mu


def link_inverse_deriv(link, eta):
    """Elementwise derivative d mu / d eta of the inverse link."""
    eta = np.asarray(eta, dtype=float)
    if link.kind == "identity":
        return np.ones_like(eta)
    if link.kind == "log":
        return np.exp(np.clip(eta, -LOG_ETA_BOUND, LOG_ETA_BOUND))
    mu = link_inverse(link, eta)
    return mu * (1.0 - mu)


def _check_mu_domain(var, mu):
    if var.kind in ("tweedie_power", "poisson_tweedie"):
        if np.any(mu <= 0.0):
            raise DomainError(f"{var.kind} variance requires mu > 0")
    elif var.kind == "binomial":
        if np.any(mu <= 0.0) or np.any(mu >= 1.0):
            raise DomainError("binomial variance requires 0 < mu < 1")


def variance_eval(var, mu, p=None):
    """Evaluate the variance function, elementwise.

    For the poisson_tweedie kind only the mu^p component is returned;
    the additive diag(mu) term is injected at covariance assembly so
    that p- and tau-derivatives touch only the dispersion term.
    """
    mu = np.asarray(mu, dtype=float)
    _check_mu_domain(var, mu)
    if var.kind == "constant":
        return np.ones_like(mu)
    if var.kind == "binomial":
        return mu * (1.0 - mu)
    return mu ** p


def variance_deriv_p(var, mu, p):
    """Derivative of the power component of the variance w.r.t. p."""
    if not var.has_power:
        raise DomainError(f"variance kind {var.kind!r} has no power parameter")
    mu = np.asarray(mu, dtype=float)
    _check_mu_domain(var, mu)
    return mu ** p * np.log(mu)


def variance_deriv_mu(var, mu, p=None):
    """Derivative of the variance function w.r.t. mu, elementwise."""
    mu = np.asarray(mu, dtype=float)
    _check_mu_domain(var, mu)
    if var.kind == "constant":
        return np.zeros_like(mu)
    if var.kind == "binomial":
        return 1.0 - 2.0 * mu
    dpow = p * mu ** (p - 1.0)
    if var.kind == "poisson_tweedie":
        return 1.0 + dpow
    return dpow


def cholesky_lower(M):
    """Lower Cholesky factor; raises FactorizationError with the pivot index."""
    M = np.asarray(M, dtype=float)
    c, info = dpotrf(M, lower=1)
    if info > 0:
        raise FactorizationError(
            f"matrix is not positive definite (pivot {info})", pivot=info
        )
    if info < 0:
        raise ValueError(f"illegal argument {-info} to dpotrf")
    return np.tril(c)


def symmetric_inverse(M):
    """Inverse of a symmetric positive definite matrix via Cholesky."""
    L = cholesky_lower(M)
    inv = cho_solve((L, True), np.eye(M.shape[0]))
    return 0.5 * (inv + inv.T)


def _dense(Z):
    if hasattr(Z, "dense"):
        return Z.dense()
    return np.asarray(Z, dtype=float)


def covlink_apply_inverse(cl, U):
    """Omega = h^{-1}(U): the matrix the covariance link maps to U."""
    U = _dense(U)
    if cl.kind == "identity":
        return U.copy()
    return symmetric_inverse(U)


def covlink_deriv(cl, U, Z):
    """Directional derivative of h^{-1} at U along a structure matrix Z."""
    Z = _dense(Z)
    if cl.kind == "identity":
        return Z.copy()
    Uinv = symmetric_inverse(_dense(U))
    out = -Uinv @ Z @ Uinv
    return 0.5 * (out + out.T)
