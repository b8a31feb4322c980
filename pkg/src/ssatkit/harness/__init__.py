"""Configuration, pipeline orchestration, reporting and the command line."""

from .config import ConfigError, ExperimentConfig, config_from_text, load_config
from .pipeline import StageError, run_pipeline
from .report import emit_outputs, pca_project

__all__ = ["ConfigError", "ExperimentConfig", "StageError", "config_from_text", "emit_outputs",
           "load_config", "pca_project", "run_pipeline"]
