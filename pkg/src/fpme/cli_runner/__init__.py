"""Configuration, orchestration and persistence for command-line experiments."""
from .config import CHECK_DEFAULTS, ConfigError, ExperimentConfig, bundled_config, load_config
from .main import main

__all__ = ["CHECK_DEFAULTS", "ConfigError", "ExperimentConfig", "bundled_config", "load_config", "main"]
