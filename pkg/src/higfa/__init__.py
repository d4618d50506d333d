"""Guided-diffusion laboratory with hierarchical text/contour/classifier guidance."""

from higfa.tensor import Tensor

__all__ = ["Tensor"]
__version__ = "0.1.0"
