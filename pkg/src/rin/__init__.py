"""Recurrent Interface Networks for denoising diffusion."""
from rin.model import RIN, ModelConfig

__version__ = "0.1.0"

__all__ = ["RIN", "ModelConfig", "__version__"]
