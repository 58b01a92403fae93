"""Reverse-mode tape autodiff on numpy storage."""

from .check import GradCheckResult, grad_check
from .optim import AdamWState, adamw_step, zero_grads
from .tensor import (
    ContractError,
    DimensionError,
    NumericError,
    Tape,
    Tensor,
    abs_,
    add,
    backward,
    clamp,
    clamp01,
    concat,
    conv2d,
    div,
    grid_sample,
    leaky_relu,
    matmul,
    mean,
    mul,
    narrow,
    neg,
    pad_reflect2d,
    relu,
    reshape,
    round_ste,
    set_finite_checks,
    sigmoid,
    sqrt,
    sub,
    sum_,
    tanh,
    upsample_nearest2x,
)

__all__ = [
    "ContractError",
    "DimensionError",
    "NumericError",
    "Tape",
    "Tensor",
    "AdamWState",
    "GradCheckResult",
    "abs_",
    "add",
    "adamw_step",
    "backward",
    "clamp",
    "clamp01",
    "concat",
    "conv2d",
    "div",
    "grad_check",
    "grid_sample",
    "leaky_relu",
    "matmul",
    "mean",
    "mul",
    "narrow",
    "neg",
    "pad_reflect2d",
    "relu",
    "reshape",
    "round_ste",
    "set_finite_checks",
    "sigmoid",
    "sqrt",
    "sub",
    "sum_",
    "tanh",
    "upsample_nearest2x",
    "zero_grads",
]
