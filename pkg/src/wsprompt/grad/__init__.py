"""Minimal reverse-mode differentiation over numpy arrays."""

from .tensor import DomainError, GradError, ShapeError, Tensor, backward, is_grad_enabled, no_grad
from .ops import (
    add,
    avg_pool2,
    concat,
    cosine_matrix,
    cross_entropy,
    div,
    embedding,
    exp,
    index,
    l2_normalize,
    layer_norm,
    log,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    scale,
    softmax,
    sub,
    sum,
    transpose,
    unfold,
)
from .optim import NonFiniteGradient, OptimizerState, adam_step, step_params

__all__ = [
    "DomainError", "GradError", "ShapeError", "Tensor", "backward", "is_grad_enabled", "no_grad",
    "add", "avg_pool2", "concat", "cosine_matrix", "cross_entropy", "div", "embedding", "exp",
    "index", "l2_normalize", "layer_norm", "log", "matmul", "mean", "mul", "relu", "reshape",
    "scale", "softmax", "sub", "sum", "transpose", "unfold",
    "NonFiniteGradient", "OptimizerState", "adam_step", "step_params",
]
