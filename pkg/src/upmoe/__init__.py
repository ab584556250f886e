"""Upcycle dense CTC sequence recognizers into sparsely-gated MoE models."""

__version__ = "0.1.0"

from .autograd import Tensor, backward, no_grad, reset_graph

__all__ = ["Tensor", "backward", "no_grad", "reset_graph", "__version__"]
