"""Reverse-mode differentiable array operations on float64 tensors."""
from .gradcheck import analytic_grad, grad_check, numeric_grad
from .ops import (EPSILON_NORM, add, concat, conv2d, div, dot, exp, index, l2_normalize, linear,
                  log, log_softmax, logsumexp, matmul, max_pool2d, mean, mul, relu, reshape,
                  smooth_l1, square, stack, sub, sum, transpose)
from .roi import DEFAULT_SAMPLES_PER_BIN, roi_align, roi_align_many
from .tensor import GradTape, Tensor, active_tape, as_tensor, is_recording, no_grad

__all__ = [
    "EPSILON_NORM", "DEFAULT_SAMPLES_PER_BIN", "GradTape", "Tensor", "active_tape", "add",
    "analytic_grad", "as_tensor", "concat", "conv2d", "div", "dot", "exp", "grad_check", "index",
    "is_recording", "l2_normalize", "linear", "log", "log_softmax", "logsumexp", "matmul",
    "max_pool2d", "mean", "mul", "no_grad", "numeric_grad", "relu", "reshape", "roi_align",
    "roi_align_many", "smooth_l1", "square", "stack", "sub", "sum", "transpose",
]
