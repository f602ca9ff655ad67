"""TV-regularized least squares solved with scaled gradient projection."""

from .estimator import SGPReconstructor
from .sgp import (
    SGPState,
    SolveReport,
    SolverConfig,
    SolverError,
    compose_iterations_check,
    objective,
    objective_gradient,
    sgp_solve,
)
from .tv import tv_beta, tv_beta_gradient

__all__ = [
    "SGPReconstructor",
    "SGPState",
    "SolveReport",
    "SolverConfig",
    "SolverError",
    "compose_iterations_check",
    "objective",
    "objective_gradient",
    "sgp_solve",
    "tv_beta",
    "tv_beta_gradient",
]
