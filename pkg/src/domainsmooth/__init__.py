"""Feature-level domain-smoothing training and zero-shot sketch-to-image retrieval."""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
