"""Comparison models sharing the frozen backbone: sequential prompts and linear probes."""

from __future__ import annotations

import numpy as np

from ..backbone import LinearHead, VisionTransformer
from ..errors import ConfigError
from ..numerics import Module, Tensor, broadcast_to, concat
from ..numerics.module import parameter, shape_only


class SequentialPrompt(Module):
    """p unordered prompt tokens prefixed to the flattened image sequence."""

    def __init__(self, num_tokens: int, dim: int, rng: np.random.Generator | None, noise: float | None = None):
        if num_tokens < 1:
            raise ConfigError("sequential prompt needs at least one token")
        if rng is None:
            self.tokens = shape_only((num_tokens, dim))
        else:
            bound = 1.0 / np.sqrt(dim) if noise is None else noise
            self.tokens = parameter(rng.uniform(-bound, bound, (num_tokens, dim)))

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[0]


class BaseHead(Module):
    def __init__(self, dim: int, num_classes: int, rng):
        self.base = LinearHead(dim, num_classes, rng)


class SequentialPromptModel(Module):
    method = "sequential"

    def __init__(self, backbone: VisionTransformer, num_tokens: int, num_classes: int,
                 rng: np.random.Generator | None = None, shape_only: bool = False, noise: float | None = None):
        if rng is None and not shape_only:
            rng = np.random.default_rng(0)
        rng = None if shape_only else rng
        self.backbone = backbone
        self.prompt = SequentialPrompt(num_tokens, backbone.cfg.embed_dim, rng, noise)
        self.heads = BaseHead(backbone.cfg.embed_dim, num_classes, rng)

    def encode(self, images) -> Tensor:
        """Image-token outputs (B, N, d) after running [P, E] through the backbone."""
        tokens = self.backbone.embed(images)
        b, _, d = tokens.shape
        p = self.prompt.num_tokens
        prefix = broadcast_to(self.prompt.tokens, (b, p, d))
        seq = self.backbone.encode(concat([prefix, tokens], axis=1))
        return seq[:, p:, :]

    def __call__(self, images) -> tuple[Tensor, None]:
        return self.heads.base(self.backbone.pool(self.encode(images))), None


def sequential_baseline_forward(model: SequentialPromptModel, images) -> Tensor:
    return model(images)[0]


class LinearProbeModel(Module):
    """Backbone plus one head; ``method`` is "head_only" or "full_finetune"."""

    def __init__(self, backbone: VisionTransformer, num_classes: int, rng: np.random.Generator | None = None,
                 shape_only: bool = False, method: str = "head_only"):
        if rng is None and not shape_only:
            rng = np.random.default_rng(0)
        rng = None if shape_only else rng
        self.method = method
        self.backbone = backbone
        self.heads = BaseHead(backbone.cfg.embed_dim, num_classes, rng)

    def __call__(self, images) -> tuple[Tensor, None]:
        return self.heads.base(self.backbone.features(images)), None
