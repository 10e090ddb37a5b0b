"""Symmetric domain-adaptive monocular depth estimation, desk scale."""

__version__ = "0.1.0"

from .tensor import Tensor, backward, clear_graph, make_rng, no_grad

__all__ = ["Tensor", "backward", "clear_graph", "make_rng", "no_grad", "__version__"]
