"""Self-supervised reconstruction of 1-bit quanta (SPAD) video."""

from .core import BitVolume, CropSpec, DenseVolume, RandomSource, Shape3

__all__ = ["BitVolume", "CropSpec", "DenseVolume", "RandomSource", "Shape3"]
__version__ = "0.1.0"
