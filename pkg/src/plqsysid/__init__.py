"""Robust impulse-response identification with PLQ penalties and stable spline kernels."""

from .errors import (
    DataError,
    DimensionError,
    FactorizationError,
    InvalidParameterError,
    PlqSysIdError,
    RankDeficiencyError,
    UnboundedPenaltyError,
    ValidationError,
)
from .estimator import (
    CvResult,
    RegressionData,
    SsEstimate,
    assemble_plq_problem,
    build_regressor,
    cv_tune_plq,
    estimate_noise_variance,
    estimate_ss_l2,
    estimate_ss_l2_ml,
    estimate_ss_plq,
    fit_hyperparameters_ml,
    fit_ss_plq,
    marginal_likelihood_objective,
)
from .kernel import StableSplineKernel
from .plq import (
    PENALTY_NAMES,
    PlqPenalty,
    direct_sum,
    evaluate,
    make_penalty,
    precompose_affine,
    scale_penalty,
)
from .solver import IpProblem, SolveReport, SolverOptions, Status, solve

__version__ = "0.1.0"

__all__ = [
    "CvResult",
    "DataError",
    "DimensionError",
    "FactorizationError",
    "InvalidParameterError",
    "IpProblem",
    "PENALTY_NAMES",
    "PlqPenalty",
    "PlqSysIdError",
    "RankDeficiencyError",
    "RegressionData",
    "SolveReport",
    "SolverOptions",
    "SsEstimate",
    "StableSplineKernel",
    "Status",
    "UnboundedPenaltyError",
    "ValidationError",
    "assemble_plq_problem",
    "build_regressor",
    "cv_tune_plq",
    "direct_sum",
    "estimate_noise_variance",
    "estimate_ss_l2",
    "estimate_ss_l2_ml",
    "estimate_ss_plq",
    "evaluate",
    "fit_hyperparameters_ml",
    "fit_ss_plq",
    "make_penalty",
    "marginal_likelihood_objective",
    "precompose_affine",
    "scale_penalty",
    "solve",
]
