"""Deep Global Clustering of hyperspectral cubes from overlapping local patches."""

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
