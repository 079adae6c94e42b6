"""Minimal reverse-mode autodiff over float64 tensors."""

from . import ops
from .gradcheck import check_gradients, grad_check
from .graph import Graph, Tensor
from .io import TensorFormatError, dumps_tensor, load_tensor, loads_tensor, save_tensor

__all__ = [
    "Graph", "Tensor", "ops", "check_gradients", "grad_check",
    "TensorFormatError", "dumps_tensor", "loads_tensor", "save_tensor", "load_tensor",
]
