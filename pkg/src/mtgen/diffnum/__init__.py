"""Minimal differentiable-computation core used by every network in mtgen."""

from . import checkpoint, ops
from .checkpoint import CheckpointError
from .gradcheck import gradcheck
from .layers import MLP, Dense, Module, parameter
from .ops import (
    DimensionError,
    clamp,
    concat,
    cross_entropy,
    dense,
    dropout,
    exp,
    log,
    log_softmax,
    one_hot,
    relu,
    sigmoid,
    softmax,
    square,
    tanh,
)
from .optim import Adam, AdamState, adam_step
from .tensor import (
    NonFiniteError,
    Tensor,
    as_tensor,
    backward,
    default_dtype,
    get_dtype,
    no_grad,
    set_dtype,
)

dense_forward = dense
dropout_apply = dropout

__all__ = [
    "Adam", "AdamState", "CheckpointError", "Dense", "DimensionError", "MLP", "Module",
    "NonFiniteError", "Tensor", "adam_step", "as_tensor", "backward", "checkpoint", "clamp",
    "concat", "cross_entropy", "default_dtype", "dense", "dense_forward", "dropout",
    "dropout_apply", "exp", "get_dtype", "gradcheck", "log", "log_softmax", "no_grad", "one_hot", "ops",
    "parameter", "relu", "set_dtype", "sigmoid", "softmax", "square", "tanh",
]
