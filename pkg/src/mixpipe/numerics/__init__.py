"""Differentiable tensors, AdamW and learning-rate schedules."""
from .gradcheck import grad_check
from .optim import AdamW, AdamWHyper, OptimState, adamw_step
from .schedule import PAPER_PRETRAIN, ScheduleConfig, lr_at_step, warmup_from_epoch_fraction
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    concat,
    cross_entropy,
    embedding,
    gelu,
    grad_enabled,
    layer_norm,
    matmul,
    mean,
    mul,
    no_grad,
    reshape,
    softmax,
    sum_,
    transpose,
    zero_grads,
)

__all__ = [
    "AdamW", "AdamWHyper", "NonFiniteError", "OptimState", "PAPER_PRETRAIN", "ScheduleConfig",
    "ShapeError", "Tensor", "adamw_step", "add", "concat", "cross_entropy", "embedding", "gelu",
    "grad_check", "grad_enabled", "layer_norm", "lr_at_step", "matmul", "mean", "mul", "no_grad",
    "reshape", "softmax", "sum_", "transpose", "warmup_from_epoch_fraction", "zero_grads",
]
