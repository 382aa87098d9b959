"""Configuration, builtin experiments, rate fitting and the command line."""

from .config import EXPERIMENTS, ExperimentConfig, default_config, load_config, parse_config
from .experiments import ExperimentReport, FitError, RateFit, hormander_scan, rate_fit, run_experiment

__all__ = [
    "EXPERIMENTS",
    "ExperimentConfig",
    "ExperimentReport",
    "FitError",
    "RateFit",
    "default_config",
    "hormander_scan",
    "load_config",
    "parse_config",
    "rate_fit",
    "run_experiment",
]
