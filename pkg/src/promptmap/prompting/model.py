"""Siamese dual-pathway classifier.

Base pathway: image tokens through the frozen backbone. Prompt pathway:
prompt maps through the same frozen backbone. After each interaction layer
the pathways exchange information with windowed cross attention in both
directions:

* distill: each prompt token queries its window of base tokens;
* prompt: each base token queries its window of prompt tokens.

Each result passes through a per-layer, per-direction adapter and is added
to the receiving pathway with weight ``gamma``. Deep mode injects further
prompt maps, scaled per channel, at the input of later layers.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..backbone import LinearHead, VisionTransformer
from ..errors import ConfigError
from ..numerics import Module, Tensor, broadcast_to
from .adapter import PromptAdapter, ScalingVector, fuse_prompted, inter_layer_fuse
from .attention import global_cross_attention, spatially_aligned_cross_attention
from .maps import PromptMap, init_prompt_map
from .windows import check_width, window_table

ORDERS = ("distill_first", "prompt_first")
MODES = ("deep", "shallow")


def default_prompt_layers(num_layers: int) -> tuple[int, ...]:
    """Three injection depths spread over the stack: 12 layers -> (0, 4, 8)."""
    return tuple(sorted({0, num_layers // 3, 2 * num_layers // 3}))


@dataclass
class PromptConfig:
    c: int = 3
    gamma: float = 0.1
    t: int | None = None  # adapter bottleneck; None -> d // 8
    scale: int = 1
    mode: str = "deep"
    prompt_layers: tuple[int, ...] | None = None  # None -> spread over depth (deep) or (0,)
    interaction_layers: tuple[int, ...] | None = None  # None -> every layer
    global_attention: bool = False
    adapter: bool = True
    init_noise: float | None = None  # None -> 1/sqrt(d)
    order: str = "distill_first"
    num_tokens: int = 16  # sequential baseline only

    def __post_init__(self):
        try:
            check_width(self.c)
        except ConfigError as exc:
            raise ConfigError(f"prompt.c: {exc}") from None
        if self.mode not in MODES:
            raise ConfigError(f"prompt.mode must be one of {MODES}, got {self.mode!r}")
        if self.order not in ORDERS:
            raise ConfigError(f"prompt.order must be one of {ORDERS}, got {self.order!r}")
        if self.scale < 1:
            raise ConfigError("prompt.scale must be >= 1")
        if self.num_tokens < 1:
            raise ConfigError("prompt.num_tokens must be >= 1")
        if self.prompt_layers is not None:
            self.prompt_layers = tuple(int(x) for x in self.prompt_layers)
        if self.interaction_layers is not None:
            self.interaction_layers = tuple(int(x) for x in self.interaction_layers)

    def resolved_prompt_layers(self, num_layers: int) -> tuple[int, ...]:
        if self.mode == "shallow":
            return (0,)
        layers = self.prompt_layers if self.prompt_layers is not None else default_prompt_layers(num_layers)
        layers = tuple(sorted(set(layers)))
        if not layers or layers[0] != 0:
            raise ConfigError("prompt.prompt_layers must include layer 0")
        if layers[-1] >= num_layers:
            raise ConfigError(f"prompt layer {layers[-1]} >= number of backbone layers {num_layers}")
        return layers

    def resolved_interaction_layers(self, num_layers: int) -> tuple[int, ...]:
        layers = self.interaction_layers if self.interaction_layers is not None else tuple(range(num_layers))
        layers = tuple(sorted(set(layers)))
        if layers and (layers[0] < 0 or layers[-1] >= num_layers):
            raise ConfigError(f"interaction layers {layers} out of range for {num_layers} backbone layers")
        return layers

    def resolved_t(self, dim: int) -> int:
        return self.t if self.t is not None else max(1, dim // 8)

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("prompt_layers", "interaction_layers"):
            if out[key] is not None:
                out[key] = list(out[key])
        return out


class DirectionAdapters(Module):
    def __init__(self, dim: int, t: int, rng, eps: float):
        self.distill = PromptAdapter(dim, t, rng, eps)
        self.prompt = PromptAdapter(dim, t, rng, eps)


class PromptSide(Module):
    """All prompt-pathway parameters, under the ``prompt.`` namespace."""

    def __init__(self):
        self.maps: dict[str, PromptMap] = {}
        self.scales: dict[str, ScalingVector] = {}
        self.adapters: dict[str, DirectionAdapters] = {}


class DualHeads(Module):
    def __init__(self, dim: int, num_classes: int, rng):
        self.base = LinearHead(dim, num_classes, rng)
        self.prompt = LinearHead(dim, num_classes, rng)


@dataclass
class PathwayState:
    base: Tensor  # (B, N, d)
    prompt: Tensor  # (B, Np, d)


class DualPathwayModel(Module):
    method = "sa2vp"

    def __init__(self, backbone: VisionTransformer, cfg: PromptConfig, num_classes: int,
                 rng: np.random.Generator | None = None, shape_only: bool = False):
        if rng is None and not shape_only:
            rng = np.random.default_rng(0)
        rng = None if shape_only else rng
        bcfg = backbone.cfg
        d, num_layers = bcfg.embed_dim, bcfg.num_layers
        self.backbone = backbone
        self._cfg = cfg
        self._gamma = float(cfg.gamma)
        self._prompt_layers = cfg.resolved_prompt_layers(num_layers)
        self._interaction_layers = cfg.resolved_interaction_layers(num_layers)
        t = cfg.resolved_t(d)
        self.prompt = PromptSide()
        for layer in self._prompt_layers:
            self.prompt.maps[str(layer)] = init_prompt_map(layer, backbone.pos_embed, cfg.scale, cfg.init_noise, rng)
            if layer != 0:
                self.prompt.scales[str(layer)] = ScalingVector(d, rng)
        if cfg.adapter:
            for layer in self._interaction_layers:
                self.prompt.adapters[str(layer)] = DirectionAdapters(d, t, rng, bcfg.ln_eps)
        self.heads = DualHeads(d, num_classes, rng)

        side = bcfg.grid
        self._base_grid = (side, side)
        self._prompt_grid = (side // cfg.scale, side // cfg.scale)
        # (index, mask) for base->prompt and prompt->base windows
        self._prompt_windows = window_table(self._base_grid, self._prompt_grid, cfg.c)
        self._distill_windows = window_table(self._prompt_grid, self._base_grid, cfg.c)

    @property
    def config(self) -> PromptConfig:
        return self._cfg

    @property
    def gamma(self) -> float:
        return self._gamma

    @gamma.setter
    def gamma(self, value: float) -> None:
        self._gamma = float(value)

    @property
    def prompt_layers(self) -> tuple[int, ...]:
        return self._prompt_layers

    @property
    def interaction_layers(self) -> tuple[int, ...]:
        return self._interaction_layers

    @property
    def prompt_grid(self) -> tuple[int, int]:
        return self._prompt_grid

    # interaction -------------------------------------------------------
    def _cross(self, query: Tensor, keys: Tensor, layer: int, windows) -> Tensor:
        lw = self.backbone.layers[layer]
        if self._cfg.global_attention:
            return global_cross_attention(query, keys, lw)
        return spatially_aligned_cross_attention(query, keys, lw, *windows)

    def _adapt(self, o: Tensor, layer: int, direction: str) -> Tensor:
        if not self._cfg.adapter:
            return o
        return getattr(self.prompt.adapters[str(layer)], direction)(o)

    def distill(self, base: Tensor, prompt: Tensor, layer: int) -> Tensor:
        """Prompt tokens query base windows; returns updated prompt features."""
        o = self._adapt(self._cross(prompt, base, layer, self._distill_windows), layer, "distill")
        return fuse_prompted(prompt, o, self._gamma)

    def prompting(self, base: Tensor, prompt: Tensor, layer: int) -> Tensor:
        """Base tokens query prompt windows; returns updated base features."""
        o = self._adapt(self._cross(base, prompt, layer, self._prompt_windows), layer, "prompt")
        return fuse_prompted(base, o, self._gamma)

    def interact(self, base: Tensor, prompt: Tensor, layer: int) -> tuple[Tensor, Tensor]:
        if self._cfg.order == "distill_first":
            prompt = self.distill(base, prompt, layer)
            base = self.prompting(base, prompt, layer)
        else:
            base = self.prompting(base, prompt, layer)
            prompt = self.distill(base, prompt, layer)
        return base, prompt

    # forward -----------------------------------------------------------
    def initial_prompt(self, batch: int) -> Tensor:
        p0 = self.prompt.maps["0"].flat()
        return broadcast_to(p0, (batch, *p0.shape))

    def encode(self, images) -> PathwayState:
        base = self.backbone.embed(images)
        prompt = self.initial_prompt(base.shape[0])
        interact_at = set(self._interaction_layers)
        for layer, block in enumerate(self.backbone.layers):
            key = str(layer)
            if layer != 0 and key in self.prompt.maps:
                prompt = inter_layer_fuse(self.prompt.maps[key].flat(), self.prompt.scales[key], prompt)
            base = block(base)
            prompt = block(prompt)
            if layer in interact_at:
                base, prompt = self.interact(base, prompt, layer)
        return PathwayState(base=base, prompt=prompt)

    def __call__(self, images) -> tuple[Tensor, Tensor]:
        state = self.encode(images)
        y_r = self.heads.base(self.backbone.pool(state.base))
        y_p = self.heads.prompt(self.backbone.pool(state.prompt))
        return y_r, y_p


def dual_pathway_forward(model: DualPathwayModel, images) -> tuple[Tensor, Tensor]:
    return model(images)
