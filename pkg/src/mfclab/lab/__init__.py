"""Experiment harness: configs, convergence studies and the ``mfclab`` CLI."""

from .config import ConfigError, ExperimentConfig, load_config
from .experiments import (
    ExperimentError,
    ExperimentResult,
    RateTable,
    SlopeFit,
    fit_loglog_slope,
    run_chaos_experiment,
    run_config,
    run_crosscheck_experiment,
    run_partialobs_experiment,
    run_stability_experiment,
    run_value_rate_experiment,
)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "ExperimentError",
    "ExperimentResult",
    "RateTable",
    "SlopeFit",
    "fit_loglog_slope",
    "load_config",
    "run_chaos_experiment",
    "run_config",
    "run_crosscheck_experiment",
    "run_partialobs_experiment",
    "run_stability_experiment",
    "run_value_rate_experiment",
]
