"""Generative memory-guided semantic reasoning for image inpainting."""

from .exceptions import ConfigurationError, InvalidInputError, MaskGenerationError
from .model import GMSRM, GenerativeMemory, ModelConfig, VARIANTS
from .training import TrainConfig, build_variant

__all__ = [
    "GMSRM",
    "GenerativeMemory",
    "ModelConfig",
    "TrainConfig",
    "VARIANTS",
    "build_variant",
    "ConfigurationError",
    "InvalidInputError",
    "MaskGenerationError",
]

__version__ = "0.1.0"
