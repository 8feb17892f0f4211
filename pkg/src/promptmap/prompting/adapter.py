"""Prompt adapter, weighted fusion and per-channel prompt scaling."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError, DimensionError
from ..numerics import Module, Tensor, layer_norm, relu
from ..numerics.module import ones, uniform_fan_in, zeros


class PromptAdapter(Module):
    """Bottleneck d -> t -> d applied to cross-attention output.

    ``relu(layer_norm(o) @ w_down) @ w_up``; no biases.
    """

    def __init__(self, dim: int, bottleneck: int, rng: np.random.Generator | None,
                 eps: float = 1e-6, allow_wide: bool = False):
        if bottleneck < 1:
            raise ConfigError("adapter bottleneck t must be >= 1")
        if not allow_wide and bottleneck > dim // 4:
            raise ConfigError(f"adapter bottleneck t={bottleneck} must be <= d/4 = {dim // 4}")
        self.eps = eps
        self.ln_gain = ones(rng, (dim,))
        self.ln_bias = zeros(rng, (dim,))
        self.w_down = uniform_fan_in(rng, (dim, bottleneck))
        self.w_up = uniform_fan_in(rng, (bottleneck, dim))

    @property
    def bottleneck(self) -> int:
        return self.w_down.shape[1]

    def __call__(self, o: Tensor) -> Tensor:
        return relu(layer_norm(o, self.ln_gain, self.ln_bias, self.eps) @ self.w_down) @ self.w_up


def prompt_adapter_apply(o: Tensor, adapter: PromptAdapter) -> Tensor:
    return adapter(o)


def fuse_prompted(f: Tensor, o: Tensor, gamma: float) -> Tensor:
    """f + gamma * o."""
    if f.shape != o.shape:
        raise DimensionError(f"cannot fuse {o.shape} into {f.shape}")
    return f + o * gamma


class ScalingVector(Module):
    """Per-channel scale for a newly injected prompt map; starts at one."""

    def __init__(self, dim: int, rng: np.random.Generator | None):
        self.e = ones(rng, (dim,))


def inter_layer_fuse(prompt_tokens: Tensor, scaling: ScalingVector, features: Tensor) -> Tensor:
    """features + e * P with e broadcast over every prompt position.

    prompt_tokens: (Np, d) or (h, w, d); features: (..., Np, d) matching.
    """
    p = prompt_tokens.reshape(-1, prompt_tokens.shape[-1]) if prompt_tokens.ndim == 3 else prompt_tokens
    if p.shape != features.shape[-2:] or scaling.e.shape != (p.shape[-1],):
        raise DimensionError(
            f"inter-layer fusion shapes disagree: prompt {prompt_tokens.shape}, "
            f"scale {scaling.e.shape}, features {features.shape}"
        )
    return features + scaling.e * p
