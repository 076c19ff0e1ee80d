"""Gaze-aware compositional GAN: conditioned eye-region synthesis, two-stage
domain transfer, inversion, augmentation, and evaluation."""

__version__ = "0.1.0"

from .config import LossWeights, ModelConfig, TrainConfig, toy_model_config
from .core import GazeDirection, SegMask
from .generator import CompositionalGenerator, ImageMaskPair, LatentCode

__all__ = [
    "CompositionalGenerator",
    "GazeDirection",
    "ImageMaskPair",
    "LatentCode",
    "LossWeights",
    "ModelConfig",
    "SegMask",
    "TrainConfig",
    "toy_model_config",
    "__version__",
]
