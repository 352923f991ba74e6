"""Toy-scale multi-encoder vision-language pipeline built on a small numpy autograd."""
from .pipeline import MixModel, ModelConfig

__version__ = "0.1.0"

__all__ = ["MixModel", "ModelConfig", "__version__"]
