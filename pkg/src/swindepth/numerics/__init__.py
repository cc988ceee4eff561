"""Minimal numpy tensor engine with reverse-mode automatic differentiation."""

from . import nn, ops
from .gradcheck import finite_diff_check, numerical_grad, rel_error
from .tensor import (
    ContractError,
    Tape,
    Tensor,
    as_tensor,
    backward,
    default_dtype,
    get_default_dtype,
    grad_enabled,
    no_grad,
    set_default_dtype,
)

__all__ = [
    "ContractError",
    "Tape",
    "Tensor",
    "as_tensor",
    "backward",
    "default_dtype",
    "finite_diff_check",
    "get_default_dtype",
    "grad_enabled",
    "nn",
    "no_grad",
    "numerical_grad",
    "ops",
    "rel_error",
    "set_default_dtype",
]
