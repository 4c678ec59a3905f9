"""Reverse-mode automatic differentiation over dense float64 tensors."""

from . import ops
from .gradcheck import check_gradient, numerical_gradient
from .ops import (
    concat,
    cumsum,
    exp,
    log,
    log_sigmoid,
    logsumexp,
    matmul,
    mean,
    reshape,
    sigmoid,
    softplus,
    solve_tril,
    sqrt,
    square,
    stack,
    tanh,
    transpose,
)
from .ops import sum as tsum
from .tensor import (
    GradientMap,
    NumericalError,
    Primitive,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    as_tensor,
    backward,
    merge_gradients,
    primitives,
    record,
    register,
    value_of,
)

__all__ = [
    "GradientMap",
    "NumericalError",
    "Primitive",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "as_tensor",
    "backward",
    "check_gradient",
    "concat",
    "cumsum",
    "exp",
    "log",
    "log_sigmoid",
    "logsumexp",
    "matmul",
    "mean",
    "merge_gradients",
    "numerical_gradient",
    "ops",
    "primitives",
    "record",
    "register",
    "reshape",
    "sigmoid",
    "softplus",
    "solve_tril",
    "sqrt",
    "square",
    "stack",
    "tanh",
    "transpose",
    "tsum",
    "value_of",
]
