from .gradcheck import finite_diff_check, numerical_gradient
from .ops import (
    add,
    dropout,
    layer_norm,
    matmul,
    mean,
    mul,
    raw_matmul,
    relu,
    reshape,
    scale,
    softmax_lastdim,
    sub,
    swap_last,
    total,
    transpose,
)
from .tensor import (
    ShapeError,
    Tape,
    Tensor,
    constant,
    get_dtype,
    get_precision,
    no_grad,
    parameter,
    precision,
    set_precision,
)

__all__ = [
    "ShapeError",
    "Tape",
    "Tensor",
    "add",
    "constant",
    "dropout",
    "finite_diff_check",
    "get_dtype",
    "get_precision",
    "layer_norm",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "numerical_gradient",
    "parameter",
    "precision",
    "raw_matmul",
    "relu",
    "reshape",
    "scale",
    "set_precision",
    "softmax_lastdim",
    "sub",
    "swap_last",
    "total",
    "transpose",
]
