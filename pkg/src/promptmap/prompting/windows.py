"""Square windows on token grids and the lookup tables built from them.

Two grids may differ by an integer scale ``s``. A query at fine coordinate
(x, y) looks at the coarse grid around (x // s, y // s). A query at coarse
coordinate (u, v) looks at every fine token whose coarse coordinate falls in
the c x c window around (u, v). Out-of-bounds positions are clipped and
masked, never padded with real tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..backbone import TokenMap
from ..errors import ConfigError, ValidationError
from ..numerics import Tensor, gather_tokens


def check_width(c: int) -> None:
    if not isinstance(c, (int, np.integer)) or c < 1 or c % 2 == 0:
        raise ConfigError(f"window width c must be a positive odd integer, got {c!r}")


def grid_scale(query_shape: tuple[int, int], key_shape: tuple[int, int]) -> tuple[int, bool]:
    """Return (s, query_is_fine) relating two grids by an integer factor."""
    (hq, wq), (hk, wk) = query_shape, key_shape
    if hq >= hk:
        s, fine = hq // hk, True
        ok = hk * s == hq and wk * s == wq
    else:
        s, fine = hk // hq, False
        ok = hq * s == hk and wq * s == wk
    if not ok:
        raise ValidationError(f"grids {query_shape} and {key_shape} are not related by an integer scale")
    return s, fine


@dataclass(frozen=True)
class WindowSpec:
    center: tuple[int, int]
    width: int
    valid: tuple[tuple[int, int], ...]  # row-major, in-bounds only
    slots: tuple[tuple[int, int], ...]  # every c*c offset position, row-major

    @property
    def mask(self) -> np.ndarray:
        valid = set(self.valid)
        return np.array([p in valid for p in self.slots])


def window(center: tuple[int, int], c: int, grid: tuple[int, int]) -> WindowSpec:
    check_width(c)
    x, y = center
    h, w = grid
    r = c // 2
    slots = tuple((x + i, y + j) for i in range(-r, r + 1) for j in range(-r, r + 1))
    valid = tuple((a, b) for a, b in slots if 0 <= a < h and 0 <= b < w)
    return WindowSpec(center=(x, y), width=c, valid=valid, slots=slots)


def extract_window(
    token_map: TokenMap, x: int, y: int, c: int, scale: int = 1
) -> tuple[Tensor, np.ndarray, WindowSpec]:
    """Tokens of the c x c window of ``token_map`` aligned with query (x, y).

    ``scale`` maps a query on a grid ``scale`` times finer onto this map.
    Returns (tokens, mask, spec): tokens is (c*c, d) in row-major slot order
    with out-of-bounds slots filled by an arbitrary valid token; mask marks
    which slots are real.
    """
    check_width(c)
    if scale < 1:
        raise ValidationError("scale must be >= 1")
    h, w = token_map.height, token_map.width
    spec = window((x // scale, y // scale), c, (h, w))
    if not spec.valid:
        raise ValidationError(f"query ({x}, {y}) lies outside the {h}x{w} map")
    mask = spec.mask
    first = spec.valid[0]
    flat_index = np.array([(a * w + b) if m else first[0] * w + first[1] for (a, b), m in zip(spec.slots, mask)])
    return gather_tokens(token_map.flatten(), flat_index), mask, spec


def window_table(
    query_shape: tuple[int, int], key_shape: tuple[int, int], c: int
) -> tuple[np.ndarray, np.ndarray]:
    """Flat key indices (Nq, W) and validity mask (Nq, W) for every query.

    Invalid slots point at key 0 and must be masked out of the softmax.
    """
    check_width(c)
    s, query_is_fine = grid_scale(query_shape, key_shape)
    hq, wq = query_shape
    hk, wk = key_shape
    r = c // 2
    rows_idx, rows_mask = [], []
    for x in range(hq):
        for y in range(wq):
            if query_is_fine:
                cx, cy = x // s, y // s
                cand = [(cx + i, cy + j) for i in range(-r, r + 1) for j in range(-r, r + 1)]
            else:
                cand = [
                    (a, b)
                    for a in range((x - r) * s, (x + r + 1) * s)
                    for b in range((y - r) * s, (y + r + 1) * s)
                ]
            rows_idx.append([a * wk + b if 0 <= a < hk and 0 <= b < wk else 0 for a, b in cand])
            rows_mask.append([0 <= a < hk and 0 <= b < wk for a, b in cand])
    return np.array(rows_idx, dtype=np.intp), np.array(rows_mask, dtype=bool)

