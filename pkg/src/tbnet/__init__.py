"""Temporal bilinear networks on a from-scratch numpy autodiff engine."""

from .tensor import ContractError, DimensionError, Tensor, no_grad

__all__ = ["ContractError", "DimensionError", "Tensor", "no_grad"]
__version__ = "0.1.0"
