"""Minimal reverse-mode differentiation on numpy arrays."""

from . import ops
from .gradcheck import check_gradients, numeric_grad, relative_error
from .params import (
    GROUPS,
    Adam,
    CheckpointError,
    ParameterStore,
    adam_step,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from .tensor import ShapeError, Tensor, as_tensor, backward, default_dtype, precision

__all__ = [
    "GROUPS",
    "Adam",
    "CheckpointError",
    "ParameterStore",
    "ShapeError",
    "Tensor",
    "adam_step",
    "as_tensor",
    "backward",
    "check_gradients",
    "default_dtype",
    "load_checkpoint",
    "numeric_grad",
    "ops",
    "precision",
    "read_checkpoint",
    "relative_error",
    "save_checkpoint",
]
