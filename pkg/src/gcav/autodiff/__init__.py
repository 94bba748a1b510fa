"""Reverse-mode autodiff over numpy arrays."""

from . import ops
from .gradcheck import grad_check, grad_check_param
from .optim import Adam, AdamState, adam_step
from .tensor import NonFiniteError, Tape, Tensor, as_tensor, backward, precision

__all__ = [
    "Adam",
    "AdamState",
    "NonFiniteError",
    "Tape",
    "Tensor",
    "adam_step",
    "as_tensor",
    "backward",
    "grad_check",
    "grad_check_param",
    "ops",
    "precision",
]
