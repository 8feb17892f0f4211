"""Similarity maps between a salient image token and the learned prompt tokens."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .numerics import no_grad
from .prompting import DualPathwayModel


def salient_token(tokens: np.ndarray) -> int:
    """Row-major index of the largest-norm token in an (N, d) array."""
    return int(np.argmax(np.linalg.norm(tokens, axis=-1)))


def cosine_map(token: np.ndarray, grid_tokens: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Cosine similarity of ``token`` (d,) to every entry of an (h, w, d) grid."""
    token = np.asarray(token, dtype=np.float64)
    grid = np.asarray(grid_tokens, dtype=np.float64)
    if grid.ndim != 3 or grid.shape[-1] != token.shape[-1]:
        raise ValidationError(f"expected an (h, w, {token.shape[-1]}) grid, got {grid.shape}")
    num = grid @ token
    den = np.linalg.norm(grid, axis=-1) * np.linalg.norm(token)
    return num / np.maximum(den, eps)


def similarity_map(model: DualPathwayModel, image: np.ndarray) -> tuple[np.ndarray, tuple[int, int]]:
    """(map over the first prompt map, salient base-token coordinate)."""
    if not isinstance(model, DualPathwayModel):
        raise ValidationError("similarity maps need an sa2vp model")
    with no_grad():
        state = model.encode(np.asarray(image)[None])
    base = state.base.data[0]
    idx = salient_token(base)
    side = model.backbone.cfg.grid
    coord = divmod(idx, side)
    return cosine_map(base[idx], model.prompt.maps["0"].tokens.data), coord


def aligned(coord: tuple[int, int], peak: tuple[int, int], scale: int, c: int) -> bool:
    """Peak within Chebyshev distance ceil(c/2) of the coordinate mapped to the prompt grid."""
    x, y = coord[0] // scale, coord[1] // scale
    return max(abs(peak[0] - x), abs(peak[1] - y)) <= math.ceil(c / 2)


def locality_rate(model: DualPathwayModel, images: np.ndarray) -> float:
    """Share of images whose similarity peak lies near the salient token."""
    if len(images) == 0:
        raise ValidationError("no images to analyse")
    hits = 0
    cfg = model.config
    for image in images:
        m, coord = similarity_map(model, image)
        peak = np.unravel_index(int(np.argmax(m)), m.shape)
        hits += aligned(coord, (int(peak[0]), int(peak[1])), cfg.scale, cfg.c)
    return hits / len(images)


def write_matrix(path: str | Path, matrix: np.ndarray) -> Path:
    """Plain-text matrix: a ``h w`` header line, then one row per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = matrix.shape
    rows = [" ".join(f"{v:.6f}" for v in row) for row in matrix]
    path.write_text(f"{h} {w}\n" + "\n".join(rows) + "\n")
    return path


def read_matrix(path: str | Path) -> np.ndarray:
    lines = Path(path).read_text().split("\n")
    h, w = (int(v) for v in lines[0].split())
    out = np.array([[float(v) for v in line.split()] for line in lines[1:1 + h]])
    if out.shape != (h, w):
        raise ValidationError(f"{path}: header says {h}x{w}, body is {out.shape}")
    return out
