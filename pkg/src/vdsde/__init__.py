"""Continuous-time latent SDE compression with learned temporal discretization."""

from . import nn  # noqa: F401  (sets float64 as the torch default)
from .model import LatentVDSDE, ModelConfig

__all__ = ["LatentVDSDE", "ModelConfig"]
__version__ = "0.1.0"
