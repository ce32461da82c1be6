"""Minimal differentiable numerics: tensors, a gradient tape and the network primitives."""
from . import ops
from .gradcheck import GradCheckResult, gradcheck
from .ops import (
    RunningStats,
    add,
    batchnorm1d,
    conv1d,
    dense,
    maxpool1d,
    mean_last,
    mul,
    reshape,
    scale,
    softmax_nll,
    softplus,
    square,
)
from .tensor import GradTape, Tensor, active_tape, backward, record

__all__ = [
    "GradCheckResult",
    "GradTape",
    "RunningStats",
    "Tensor",
    "active_tape",
    "add",
    "backward",
    "batchnorm1d",
    "conv1d",
    "dense",
    "gradcheck",
    "maxpool1d",
    "mean_last",
    "mul",
    "ops",
    "record",
    "reshape",
    "scale",
    "softmax_nll",
    "softplus",
    "square",
]
