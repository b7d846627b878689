"""Minimal differentiable compute substrate."""

from .module import Module
from .gradcheck import GradCheckReport, gradient_check
from .ops import (add, concat, conv1d, embedding, gather_rows, gelu, getitem, layer_norm, linear,
                  log_softmax, matmul, mean, mul, reshape, softmax, softmax_cross_entropy, stack,
                  sub, sum_, transpose)
from .optim import OptimizerState, adamw_step, lr_at
from .tensor import Parameter, Tensor, grad_enabled, no_grad

__all__ = [
    "Tensor", "Parameter", "Module", "no_grad", "grad_enabled",
    "add", "sub", "mul", "matmul", "linear", "gelu", "reshape", "transpose", "getitem",
    "concat", "stack", "sum_", "mean", "embedding", "gather_rows", "softmax", "log_softmax",
    "layer_norm", "softmax_cross_entropy", "conv1d",
    "OptimizerState", "adamw_step", "lr_at",
    "GradCheckReport", "gradient_check",
]
