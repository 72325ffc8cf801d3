"""Compositional stochastic optimization for semi-implicit variational inference."""

from .composition import CompositionalProblem, from_callback, reference_gradient
from .solver import OptimizerState, RunResult, ScheduleConfig, run, schedule

__version__ = "0.1.0"

__all__ = [
    "CompositionalProblem",
    "OptimizerState",
    "RunResult",
    "ScheduleConfig",
    "from_callback",
    "reference_gradient",
    "run",
    "schedule",
]
