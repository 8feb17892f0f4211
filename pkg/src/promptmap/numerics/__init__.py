from .tensor import (
    Tensor,
    as_tensor,
    backward,
    default_dtype,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    set_default_dtype,
    trace,
)
from .ops import (
    add,
    broadcast_to,
    concat,
    cross_entropy,
    div,
    einsum,
    exp,
    gather_tokens,
    gelu,
    getitem,
    layer_norm,
    log,
    matmul,
    mean,
    mul,
    put_slots,
    neg,
    relu,
    reshape,
    softmax,
    sub,
    take_slots,
    transpose,
)
from .ops import sum as sum_  # noqa: F401  (avoid shadowing the builtin on star-import)
from .module import Module, parameter, uniform_fan_in

__all__ = [
    "Tensor", "as_tensor", "backward", "trace", "no_grad", "is_grad_enabled",
    "default_dtype", "get_default_dtype", "set_default_dtype",
    "add", "sub", "mul", "div", "neg", "exp", "log", "matmul", "einsum",
    "sum_", "mean", "reshape", "transpose", "broadcast_to", "getitem", "concat",
    "gather_tokens", "take_slots", "put_slots", "relu", "gelu", "softmax", "layer_norm", "cross_entropy",
    "Module", "parameter", "uniform_fan_in",
]
