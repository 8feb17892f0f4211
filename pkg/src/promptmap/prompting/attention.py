"""Cross attention between the two pathways, borrowing a frozen block's q/k/v.

For a query token ``f`` and its window ``R``::

    out = softmax((f Wq)(R Wk)^T / sqrt(d_s)) (R Wv) + f

computed per head, with d_s the per-head key dimension. The residual adds
the raw query token, not its projection.
"""

from __future__ import annotations

import math

import numpy as np

from ..backbone import EncoderLayer
from ..errors import ContractError, DimensionError
from ..numerics import Tensor, matmul, put_slots, softmax, take_slots


def _heads(x: Tensor, num_heads: int) -> Tensor:
    return x.reshape(*x.shape[:-1], num_heads, x.shape[-1] // num_heads)


def spatially_aligned_cross_attention(
    query: Tensor, keys: Tensor, lw: EncoderLayer, index: np.ndarray, mask: np.ndarray
) -> Tensor:
    """query (B, Nq, d) attends keys (B, Nk, d) through a window table.

    ``index``/``mask`` come from :func:`~promptmap.prompting.windows.window_table`.
    """
    if query.ndim != 3 or keys.ndim != 3 or query.shape[-1] != keys.shape[-1]:
        raise DimensionError(f"cross attention got query {query.shape} and keys {keys.shape}")
    if index.shape[0] != query.shape[1]:
        raise DimensionError(f"window table has {index.shape[0]} rows for {query.shape[1]} queries")
    if not mask.any(axis=1).all():
        raise ContractError("every query needs a non-empty window")
    nh = lw.num_heads
    b, nq, d = query.shape
    nk = keys.shape[1]
    dh = d // nh
    w = index.shape[1]
    q = _heads(query @ lw.w_q, nh).transpose(0, 2, 1, 3)  # (B, H, Nq, dh)
    k = _heads(keys @ lw.w_k, nh).transpose(0, 2, 3, 1)   # (B, H, dh, Nk)
    v = _heads(keys @ lw.w_v, nh).transpose(0, 2, 1, 3)   # (B, H, Nk, dh)
    # one dense product for all pair scores, then keep only window slots;
    # cheap while grids stay desk-sized
    pairs = (np.arange(nq)[:, None] * nk + index).reshape(-1)
    valid = mask.reshape(-1)
    scores = (matmul(q, k) * (1.0 / math.sqrt(dh))).reshape(b, nh, nq * nk)
    scores = take_slots(scores, pairs, valid).reshape(b, nh, nq, w)
    weights = softmax(scores, axis=-1, mask=mask[None, None])
    dense = put_slots(weights.reshape(b, nh, nq * w), pairs, valid, nq * nk).reshape(b, nh, nq, nk)
    return matmul(dense, v).transpose(0, 2, 1, 3).reshape(b, nq, d) + query


def global_cross_attention(query: Tensor, keys: Tensor, lw: EncoderLayer) -> Tensor:
    """Every query attends every key (the no-alignment ablation)."""
    if query.ndim != 3 or keys.ndim != 3 or query.shape[-1] != keys.shape[-1]:
        raise DimensionError(f"cross attention got query {query.shape} and keys {keys.shape}")
    nh = lw.num_heads
    b, nq, d = query.shape
    dh = d // nh
    q = _heads(query @ lw.w_q, nh).transpose(0, 2, 1, 3)
    k = _heads(keys @ lw.w_k, nh).transpose(0, 2, 3, 1)
    v = _heads(keys @ lw.w_v, nh).transpose(0, 2, 1, 3)
    weights = softmax(matmul(q, k) * (1.0 / math.sqrt(dh)), axis=-1)
    return matmul(weights, v).transpose(0, 2, 1, 3).reshape(b, nq, d) + query


def cross_attend_token(
    q_token: Tensor, window_tokens: Tensor, lw: EncoderLayer, mask: np.ndarray | None = None
) -> Tensor:
    """Single query (d,) over a window (k, d); returns a (d,) token."""
    if window_tokens.ndim != 2 or window_tokens.shape[0] == 0:
        raise ContractError("cross attention needs a non-empty window")
    k = window_tokens.shape[0]
    if mask is None:
        mask = np.ones(k, dtype=bool)
    index = np.arange(k)[None, :]
    out = spatially_aligned_cross_attention(
        q_token.reshape(1, 1, -1), window_tokens.reshape(1, k, -1), lw, index, np.asarray(mask)[None, :]
    )
    return out.reshape(-1)
