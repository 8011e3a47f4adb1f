"""Attention-free bidirectional encoder with split retrieval, on numpy."""

from .config import ModelConfig
from .model import AveyB, load_model, save_model
from .numerics import ConfigurationError, Matrix, NonFiniteError, Rng, Tape, UsageError
from .training import TrainConfig, train

__all__ = [
    "AveyB", "ConfigurationError", "Matrix", "ModelConfig", "NonFiniteError", "Rng", "Tape",
    "TrainConfig", "UsageError", "load_model", "save_model", "train",
]
__version__ = "0.1.0"
