"""Experiment drivers, reference oracles and the command-line interface."""

from .config import RunConfig, build_config, load_config
from .experiments import ExperimentAborted, run_bias_rate, run_blr, run_config, run_recurrence, run_toy
from .gradcheck import run_gradcheck
from .mcmc import mcmc_oracle, random_walk_metropolis
from .recurrence import RecurrenceCase, check_recurrence

__all__ = [
    "ExperimentAborted",
    "RecurrenceCase",
    "RunConfig",
    "build_config",
    "check_recurrence",
    "load_config",
    "mcmc_oracle",
    "random_walk_metropolis",
    "run_bias_rate",
    "run_blr",
    "run_config",
    "run_gradcheck",
    "run_recurrence",
    "run_toy",
]
