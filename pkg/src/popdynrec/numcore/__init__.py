"""Minimal dense-tensor core with reverse-mode differentiation and Adam."""

from .optim import Adam, AdamState, adam_step
from .tensor import (
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    default_dtype,
    div,
    dropout,
    exp,
    getitem,
    layer_norm,
    log,
    log_sigmoid,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    precision,
    relu,
    reshape,
    set_default_dtype,
    sigmoid,
    softmax_masked,
    sub,
    sum_,
    swapaxes,
    transpose,
)

__all__ = [
    "Adam", "AdamState", "adam_step", "Tensor", "add", "as_tensor", "backward", "concat",
    "default_dtype", "div", "dropout", "exp", "getitem", "layer_norm", "log", "log_sigmoid",
    "matmul", "mean", "mul", "neg", "no_grad", "precision", "relu", "reshape",
    "set_default_dtype", "sigmoid", "softmax_masked", "sub", "sum_", "swapaxes", "transpose",
]
