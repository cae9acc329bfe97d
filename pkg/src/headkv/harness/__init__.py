"""Experiment runner, configuration, CLI and reporting."""
from .config import ExperimentConfig, GridConfig, OracleModel, config_from_dict, default_config, load_config
from .runner import (Comparison, Method, Row, compare_methods, evaluate, mean_accuracy,
                     run_estimation, run_needle_grid, run_reasoning_suite)

__all__ = [
    "Comparison", "ExperimentConfig", "GridConfig", "Method", "OracleModel", "Row",
    "compare_methods", "config_from_dict", "default_config", "evaluate", "load_config",
    "mean_accuracy", "run_estimation", "run_needle_grid", "run_reasoning_suite",
]
