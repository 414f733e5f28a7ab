"""Configuration-driven pipeline: data, training, generation, evaluation, figures."""

from .config import ExperimentConfig, load_config
from .pipeline import MissingArtifact, STAGES

__all__ = ["ExperimentConfig", "load_config", "MissingArtifact", "STAGES"]
