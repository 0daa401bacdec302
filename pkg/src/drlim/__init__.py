"""Bound-preserving, mass-conserving limiting of cell averages."""
from .limiter import (
    Bounds,
    DRConfig,
    DRResult,
    InfeasibleError,
    LimiterError,
    LimiterProblem,
    NotConvergedError,
    Regime,
    dr_solve,
    estimate_angle,
    limit_cell_averages,
    project_box_hyperplane_oracle,
    select_parameters,
)

__all__ = [
    "Bounds",
    "DRConfig",
    "DRResult",
    "InfeasibleError",
    "LimiterError",
    "LimiterProblem",
    "NotConvergedError",
    "Regime",
    "dr_solve",
    "estimate_angle",
    "limit_cell_averages",
    "project_box_hyperplane_oracle",
    "select_parameters",
]
