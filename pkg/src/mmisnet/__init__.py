"""Similarity-fusion segmentation network over a unified partial-label space."""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
