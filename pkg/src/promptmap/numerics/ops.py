"""Differentiable primitives.

Each function computes its forward value with numpy and registers the
adjoint rule as a closure. Broadcasting follows numpy; adjoints are summed
back down to the operand's shape.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..errors import DimensionError, NumericError, ValidationError
from .tensor import Tensor, as_tensor


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    if np.any(b.data == 0):
        raise NumericError("division by zero")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log of non-positive value")
    return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    fold = b.ndim == 2 and a.ndim > 2
    if fold:
        # one GEMM over all leading rows instead of a batched loop
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(*a.shape[:-1], b.shape[-1])
    else:
        out = a.data @ b.data

    def bw(g):
        ga = None
        if a.requires_grad:
            if fold:
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape)
            else:
                ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = None
        if b.requires_grad:
            if fold:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor._from_op(out, (a, b), bw, "matmul")


def einsum(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum.

    Every index of an operand must appear in the other operand or the output,
    which makes each adjoint another einsum of the same form.
    """
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for mine, other in ((sa, sb), (sb, sa)):
        loose = set(mine) - set(other) - set(out_sub)
        if loose:
            raise ValidationError(f"einsum index {sorted(loose)} would be summed on one side only")
    a, b = _pair(a, b)
    out = np.einsum(subscripts, a.data, b.data, optimize=True)

    def bw(g):
        ga = np.einsum(f"{out_sub},{sb}->{sa}", g, b.data, optimize=True) if a.requires_grad else None
        gb = np.einsum(f"{out_sub},{sa}->{sb}", g, a.data, optimize=True) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), bw, "einsum")


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return Tensor._from_op(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    out = np.mean(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape),)

    return Tensor._from_op(np.asarray(out), (a,), bw, "mean")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)
    return Tensor._from_op(out, (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = np.broadcast_to(a.data, tuple(shape))
    return Tensor._from_op(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, slice)) or p is None or p is Ellipsis for p in parts)


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(np.array(out), (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(out, tensors, bw, "concat")


def gather_tokens(x: Tensor, index: np.ndarray) -> Tensor:
    """Select token rows: ``x[..., index, :]`` for an integer index array.

    ``x`` has shape (..., M, d) and ``index`` any integer shape S; the result
    has shape (..., *S, d). The adjoint scatters back with one dense product
    against a one-hot selection matrix.
    """
    index = np.asarray(index, dtype=np.intp)
    m = x.shape[-2]
    if index.size and (index.min() < 0 or index.max() >= m):
        raise DimensionError(f"token index out of range for {m} tokens")
    out = np.take(x.data, index, axis=-2)

    def bw(g):
        lead = x.shape[:-2]
        d = x.shape[-1]
        flat = index.reshape(-1)
        onehot = np.zeros((m, flat.size), dtype=g.dtype)
        onehot[flat, np.arange(flat.size)] = 1.0
        gflat = g.reshape(*lead, flat.size, d)
        return (onehot @ gflat,)

    return Tensor._from_op(out, (x,), bw, "gather_tokens")


def _slot_tables(index: np.ndarray, valid: np.ndarray, size: int) -> tuple[np.ndarray, np.ndarray]:
    index = np.asarray(index, dtype=np.intp).reshape(-1)
    valid = np.asarray(valid, dtype=bool).reshape(-1)
    if index.shape != valid.shape:
        raise DimensionError("slot index and validity mask differ in shape")
    chosen = index[valid]
    if chosen.size and (chosen.min() < 0 or chosen.max() >= size):
        raise DimensionError(f"slot index out of range for axis of length {size}")
    if np.unique(chosen).size != chosen.size:
        raise ValidationError("valid slots must address distinct positions")
    return chosen, np.flatnonzero(valid)


def take_slots(x: Tensor, index: np.ndarray, valid: np.ndarray) -> Tensor:
    """out[..., k] = x[..., index[k]] where valid[k], else 0.

    Valid slots must address distinct positions, so the adjoint is a plain
    scatter with no collisions.
    """
    size = x.shape[-1]
    chosen, slots = _slot_tables(index, valid, size)
    k = np.asarray(valid).size
    out = np.zeros(x.shape[:-1] + (k,), dtype=x.dtype)
    out[..., slots] = x.data[..., chosen]

    def bw(g):
        full = np.zeros_like(x.data)
        full[..., chosen] = g[..., slots]
        return (full,)

    return Tensor._from_op(out, (x,), bw, "take_slots")


def put_slots(x: Tensor, index: np.ndarray, valid: np.ndarray, size: int) -> Tensor:
    """Adjoint of :func:`take_slots`: out[..., index[k]] = x[..., k] on valid slots."""
    chosen, slots = _slot_tables(index, valid, size)
    if x.shape[-1] != np.asarray(valid).size:
        raise DimensionError(f"put_slots expects {np.asarray(valid).size} slots, got {x.shape[-1]}")
    out = np.zeros(x.shape[:-1] + (size,), dtype=x.dtype)
    out[..., chosen] = x.data[..., slots]

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[..., slots] = g[..., chosen]
        return (gx,)

    return Tensor._from_op(out, (x,), bw, "put_slots")


def relu(a: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is 0."""
    mask = a.data > 0
    out = np.where(mask, a.data, 0.0).astype(a.dtype, copy=False)
    return Tensor._from_op(out, (a,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    inner = _GELU_C * (x + 0.044715 * x2 * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return Tensor._from_op(out, (a,), bw, "gelu")


def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-stabilised softmax along ``axis``.

    ``mask`` (broadcastable boolean) marks the entries that participate; the
    rest get exactly zero weight. Each slice needs at least one valid entry.
    """
    x = a.data
    if not np.isfinite(x).all():
        raise NumericError("softmax input is not finite")
    if mask is None:
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
    else:
        mask = np.broadcast_to(mask, x.shape)
        if not mask.any(axis=axis).all():
            raise ValidationError("softmax mask leaves an empty slice")
        peak = np.where(mask, x, -np.inf).max(axis=axis, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, x - peak, 0.0)), 0.0)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (a,), bw, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm expects gain/bias of shape ({d},), got {gain.shape}, {bias.shape}")
    if eps <= 0:
        raise ValidationError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        ggain = _unbroadcast(g * xhat, gain.shape) if gain.requires_grad else None
        gbias = _unbroadcast(g, bias.shape) if bias.requires_grad else None
        return gx, ggain, gbias

    return Tensor._from_op(out, (x, gain, bias), bw, "layer_norm")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects (n, K) logits, got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {labels.shape}")
    if labels.dtype.kind not in "iu" or labels.min() < 0 or labels.max() >= k:
        raise ValidationError(f"labels must be integers in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return Tensor._from_op(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "cross_entropy")
