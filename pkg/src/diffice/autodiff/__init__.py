from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    avg_pool2d,
    backward,
    broadcast_to,
    concat,
    conv2d,
    div,
    exp,
    grad,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    sigmoid,
    softmax,
    square,
    sub,
    sum_,
    transpose,
    upsample_nearest,
)
from .gradcheck import GradCheckResult, finite_diff_check

__all__ = [
    "NonFiniteError", "ShapeError", "Tensor", "add", "as_tensor", "avg_pool2d", "backward",
    "broadcast_to", "concat", "conv2d", "div", "exp", "grad", "log", "log_softmax", "matmul",
    "mean", "mul", "no_grad", "relu", "reshape", "sigmoid", "softmax", "square", "sub", "sum_",
    "transpose", "upsample_nearest", "GradCheckResult", "finite_diff_check",
]
