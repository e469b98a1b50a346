"""Multivariate covariance generalized linear models.

Joint mean/covariance modelling from second-moment assumptions: link
and variance functions for the mean, a covariance link with a matrix
linear predictor for the dependence structure, coupled across responses
by a generalized Kronecker product and fitted by Newton-scoring
estimating functions with Godambe sandwich standard errors.
"""

from .covariance import (
    JointCovariance,
    ResponseCovariance,
    build_sigma_r,
    generalized_kronecker,
    sigma_b_from_rho,
)
from .errors import (
    ConvergenceError,
    DomainError,
    FactorizationError,
    McglmError,
    SingularMatrixError,
    StepFailureError,
)
from .estfun import EstimatingState, GodambeResult, build_godambe, build_state
from .functions import CovLinkSpec, LinkSpec, VarianceSpec
from .matpred import (
    MatrixPredictor,
    StructureMatrix,
    assemble_U,
    mat_compound_symmetry,
    mat_identity,
    mat_inverse_distance,
    mat_kronecker,
    mat_neighborhood,
    mat_pair_indicator,
)
from .model import ModelSpec, ResponseSpec, ThetaPartition, make_theta
from .simulate import SimSpec, simulate_counts_marginal, simulate_gaussian
from .solver import (
    FitResult,
    SolverOptions,
    chaser_step,
    fit,
    initialize,
    reciprocal_step,
)

__version__ = "0.1.0"

__all__ = [
    "ConvergenceError",
    "CovLinkSpec",
    "DomainError",
    "EstimatingState",
    "FactorizationError",
    "FitResult",
    "GodambeResult",
    "JointCovariance",
    "LinkSpec",
    "MatrixPredictor",
    "McglmError",
    "ModelSpec",
    "ResponseCovariance",
    "ResponseSpec",
    "SimSpec",
    "SingularMatrixError",
    "SolverOptions",
    "StepFailureError",
    "StructureMatrix",
    "ThetaPartition",
    "VarianceSpec",
    "assemble_U",
    "build_godambe",
    "build_sigma_r",
    "build_state",
    "chaser_step",
    "fit",
    "generalized_kronecker",
    "initialize",
    "make_theta",
    "mat_compound_symmetry",
    "mat_identity",
    "mat_inverse_distance",
    "mat_kronecker",
    "mat_neighborhood",
    "mat_pair_indicator",
    "reciprocal_step",
    "sigma_b_from_rho",
    "simulate_counts_marginal",
    "simulate_gaussian",
]
