"""Learnable 2D prompt maps aligned with the image token grid."""

from __future__ import annotations

import numpy as np

from ..errors import ValidationError
from ..numerics import Module, Tensor
from ..numerics.module import parameter, shape_only


def pool_positions(pos_embed: np.ndarray, scale: int) -> np.ndarray:
    """Average-pool an (h, w, d) positional grid by an integer factor."""
    h, w, d = pos_embed.shape
    if h % scale or w % scale:
        raise ValidationError(f"a {h}x{w} token grid is not divisible by scale {scale}")
    return pos_embed.reshape(h // scale, scale, w // scale, scale, d).mean(axis=(1, 3))


class PromptMap(Module):
    """Prompt tokens P^l of shape (h/s, w/s, d) for backbone layer ``layer``.

    The backbone's positional embeddings are folded into the initial value,
    so the tokens carry their grid position from construction on.
    """

    def __init__(self, layer: int, tokens: Tensor, scale: int = 1):
        self.layer = layer
        self.scale = scale
        self.tokens = tokens

    @property
    def grid(self) -> tuple[int, int]:
        return self.tokens.shape[0], self.tokens.shape[1]

    def flat(self) -> Tensor:
        return self.tokens.reshape(-1, self.tokens.shape[-1])


def init_prompt_map(
    layer: int,
    pos_embed: Tensor | np.ndarray,
    scale: int = 1,
    noise: float | None = None,
    rng: np.random.Generator | None = None,
) -> PromptMap:
    """tokens = U(-noise, noise) + pooled positional embeddings.

    ``noise`` defaults to 1/sqrt(d). With ``rng=None`` the map is shape-only.
    """
    pos = pos_embed.data if isinstance(pos_embed, Tensor) else np.asarray(pos_embed)
    if scale < 1:
        raise ValidationError("prompt map scale must be >= 1")
    h, w, d = pos.shape
    if h % scale or w % scale:
        raise ValidationError(f"prompt map scale {scale} does not divide the {h}x{w} image grid")
    if rng is None:
        return PromptMap(layer, shape_only((h // scale, w // scale, d)), scale)
    base = pool_positions(pos, scale) if scale > 1 else pos
    bound = 1.0 / np.sqrt(d) if noise is None else noise
    values = base + (rng.uniform(-bound, bound, base.shape) if bound > 0 else 0.0)
    return PromptMap(layer, parameter(values), scale)
