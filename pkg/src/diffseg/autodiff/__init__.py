"""Minimal numpy tensor library with reverse-mode automatic differentiation."""
from .conv import conv3d, conv3d_reference
from .gradcheck import analytic_gradient, finite_difference_check
from .ops import (
    LOG_FLOOR,
    add,
    clip,
    concat,
    div,
    exp,
    instance_norm,
    log,
    matmul,
    mean,
    mul,
    neg,
    relu,
    reshape,
    scale,
    sigmoid,
    silu,
    softmax,
    split,
    sqrt,
    square,
    sub,
    sum,
    upsample_nearest,
)
from .tensor import (
    Graph,
    Node,
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
    current_graph,
    no_grad,
    stop_gradient,
)

__all__ = [
    "LOG_FLOOR", "Graph", "Node", "NonFiniteError", "ShapeError", "Tensor",
    "add", "analytic_gradient", "backward", "clip", "concat", "conv3d",
    "conv3d_reference", "current_graph", "div", "exp", "finite_difference_check",
    "instance_norm", "log", "matmul", "mean", "mul", "neg", "no_grad", "relu",
    "reshape", "scale", "sigmoid", "silu", "softmax", "split", "sqrt", "square",
    "stop_gradient", "sub", "sum", "upsample_nearest",
]
