"""
Minimal dense-tensor library with reverse-mode automatic differentiation
"""
from .tensor import (
    Tensor,
    Graph,
    backward,
    current_graph,
    graph_scope,
    no_grad,
    zero_grad,
)
from .ops import (
    abs,
    add,
    bilinear_sample,
    binary_cross_entropy_with_logits,
    binary_entropy,
    concat,
    conv2d,
    exp,
    getitem,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    sigmoid_focal_loss,
    sub,
    sum,
    transpose,
    upsample_nearest2x,
)
from .gradcheck import GradCheckReport, finite_diff_check

__all__ = [
    "Tensor",
    "Graph",
    "backward",
    "current_graph",
    "graph_scope",
    "no_grad",
    "zero_grad",
    "abs",
    "add",
    "bilinear_sample",
    "binary_cross_entropy_with_logits",
    "binary_entropy",
    "concat",
    "conv2d",
    "exp",
    "getitem",
    "matmul",
    "mean",
    "mul",
    "relu",
    "reshape",
    "scale",
    "sigmoid",
    "sigmoid_focal_loss",
    "sub",
    "sum",
    "transpose",
    "upsample_nearest2x",
    "GradCheckReport",
    "finite_diff_check",
]
