"""Minimal reverse-mode automatic differentiation on numpy arrays."""

from . import functional
from .gradcheck import grad_check
from .serialize import load_tensor, save_tensor
from .tensor import Tensor, backward, is_grad_enabled, no_grad, topo_order

__all__ = [
    "Tensor", "backward", "functional", "grad_check", "is_grad_enabled", "load_tensor",
    "no_grad", "save_tensor", "topo_order",
]
