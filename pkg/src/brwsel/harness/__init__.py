"""Configuration, orchestration, result records and plot-data emission."""

from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .records import read_records, run_experiment

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "parse_config", "read_records",
           "run_experiment"]
