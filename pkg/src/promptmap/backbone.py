"""Desk-scale Vision Transformer used as the frozen backbone.

Tokens live on a side x side grid. Grid coordinate (x, y) is row x, column y
and covers pixels ``[x*p, (x+1)*p) x [y*p, (y+1)*p)``. Sequences are the
row-major flattening of that grid. There is no class token: classifiers
mean-pool the final token map.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, ValidationError
from .numerics import Module, Tensor, layer_norm, matmul, softmax
from .numerics import ops
from .numerics.module import ones, parameter, uniform_fan_in, zeros


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    embed_dim: int = 64
    num_layers: int = 6
    num_heads: int = 4
    mlp_ratio: float = 4.0
    num_pretrain_classes: int = 6
    ln_eps: float = 1e-6

    def __post_init__(self):
        for name in ("image_size", "patch_size", "channels", "embed_dim", "num_layers", "num_heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"backbone.{name} must be >= 1")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"backbone.image_size ({self.image_size}) must be divisible by patch_size ({self.patch_size})"
            )
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"backbone.embed_dim ({self.embed_dim}) must be divisible by num_heads ({self.num_heads})"
            )
        if self.mlp_ratio <= 0:
            raise ConfigError("backbone.mlp_ratio must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TokenMap:
    """A (possibly batched) h x w grid of d-dimensional tokens."""

    tokens: Tensor  # (..., h, w, d)

    def __post_init__(self):
        if self.tokens.ndim < 3:
            raise DimensionError(f"TokenMap needs (..., h, w, d) tokens, got {self.tokens.shape}")

    @property
    def height(self) -> int:
        return self.tokens.shape[-3]

    @property
    def width(self) -> int:
        return self.tokens.shape[-2]

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]

    def flatten(self) -> Tensor:
        lead = self.tokens.shape[:-3]
        return self.tokens.reshape(*lead, self.height * self.width, self.dim)

    @classmethod
    def unflatten(cls, seq: Tensor, height: int, width: int) -> TokenMap:
        if seq.shape[-2] != height * width:
            raise DimensionError(f"{seq.shape[-2]} tokens cannot form a {height}x{width} map")
        return cls(seq.reshape(*seq.shape[:-2], height, width, seq.shape[-1]))


def extract_patches(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, C, H, W) -> (B, H/p, W/p, C*p*p), channel-major within each patch."""
    b, c, h, w = images.shape
    p = patch_size
    x = images.reshape(b, c, h // p, p, w // p, p)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(b, h // p, w // p, c * p * p)


def assemble_patches(patches: np.ndarray, patch_size: int, channels: int) -> np.ndarray:
    """Inverse of :func:`extract_patches`."""
    b, gh, gw, _ = patches.shape
    p = patch_size
    x = patches.reshape(b, gh, gw, channels, p, p).transpose(0, 3, 1, 4, 2, 5)
    return x.reshape(b, channels, gh * p, gw * p)


class EncoderLayer(Module):
    """Pre-norm transformer block; its q/k/v projections are reused for cross attention."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator | None):
        d, hidden = cfg.embed_dim, cfg.mlp_hidden
        self.num_heads = cfg.num_heads
        self.eps = cfg.ln_eps
        self.ln1_gain = ones(rng, (d,))
        self.ln1_bias = zeros(rng, (d,))
        self.w_q = uniform_fan_in(rng, (d, d))
        self.w_k = uniform_fan_in(rng, (d, d))
        self.w_v = uniform_fan_in(rng, (d, d))
        self.w_out = uniform_fan_in(rng, (d, d))
        self.b_out = zeros(rng, (d,))
        self.ln2_gain = ones(rng, (d,))
        self.ln2_bias = zeros(rng, (d,))
        self.w_fc1 = uniform_fan_in(rng, (d, hidden))
        self.b_fc1 = zeros(rng, (hidden,))
        self.w_fc2 = uniform_fan_in(rng, (hidden, d))
        self.b_fc2 = zeros(rng, (d,))

    def split_heads(self, x: Tensor) -> Tensor:
        """(..., T, d) -> (..., T, heads, d/heads) without copying."""
        d = x.shape[-1]
        return x.reshape(*x.shape[:-1], self.num_heads, d // self.num_heads)

    def attention(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        dh = d // self.num_heads
        q = self.split_heads(x @ self.w_q).transpose(0, 2, 1, 3)
        k = self.split_heads(x @ self.w_k).transpose(0, 2, 3, 1)
        v = self.split_heads(x @ self.w_v).transpose(0, 2, 1, 3)
        weights = softmax(matmul(q, k) * (1.0 / math.sqrt(dh)), axis=-1)
        mixed = matmul(weights, v).transpose(0, 2, 1, 3).reshape(b, t, d)
        return mixed @ self.w_out + self.b_out

    def mlp(self, x: Tensor) -> Tensor:
        return ops.gelu(x @ self.w_fc1 + self.b_fc1) @ self.w_fc2 + self.b_fc2

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[-1] != self.w_q.shape[0]:
            raise DimensionError(f"encoder layer expects (B, T, {self.w_q.shape[0]}) tokens, got {x.shape}")
        x = x + self.attention(layer_norm(x, self.ln1_gain, self.ln1_bias, self.eps))
        return x + self.mlp(layer_norm(x, self.ln2_gain, self.ln2_bias, self.eps))


# a block doubles as the weight bundle that cross attention borrows
LayerWeights = EncoderLayer


def encoder_layer(x: Tensor, lw: EncoderLayer) -> Tensor:
    return lw(x)


class VisionTransformer(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator | None = None, shape_only: bool = False):
        if rng is None and not shape_only:
            rng = np.random.default_rng(0)
        rng = None if shape_only else rng
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_weight = uniform_fan_in(rng, (cfg.patch_dim, d))
        self.patch_bias = zeros(rng, (d,))
        if rng is None:
            self.pos_embed = zeros(None, (cfg.grid, cfg.grid, d))
        else:
            bound = 1.0 / math.sqrt(d)
            self.pos_embed = parameter(rng.uniform(-bound, bound, (cfg.grid, cfg.grid, d)))
        self.layers = [EncoderLayer(cfg, rng) for _ in range(cfg.num_layers)]
        self.norm_gain = ones(rng, (d,))
        self.norm_bias = zeros(rng, (d,))

    def check_images(self, images) -> np.ndarray:
        images = images.data if isinstance(images, Tensor) else np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        c, s = self.cfg.channels, self.cfg.image_size
        if images.ndim != 4 or images.shape[1:] != (c, s, s):
            raise ValidationError(f"expected images of shape (B, {c}, {s}, {s}), got {images.shape}")
        return images.astype(self.patch_weight.dtype, copy=False)

    def patchify(self, images) -> TokenMap:
        """Project each patch and add its positional embedding: (B, side, side, d)."""
        images = self.check_images(images)
        patches = Tensor(extract_patches(images, self.cfg.patch_size))
        return TokenMap(patches @ self.patch_weight + self.patch_bias + self.pos_embed)

    def embed(self, images) -> Tensor:
        return self.patchify(images).flatten()

    def encode(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def pool(self, x: Tensor) -> Tensor:
        """Final layer norm, then mean over tokens: (B, T, d) -> (B, d)."""
        return layer_norm(x, self.norm_gain, self.norm_bias, self.cfg.ln_eps).mean(axis=1)

    def features(self, images) -> Tensor:
        return self.pool(self.encode(self.embed(images)))


class LinearHead(Module):
    def __init__(self, dim: int, num_classes: int, rng: np.random.Generator | None):
        self.weight = uniform_fan_in(rng, (dim, num_classes))
        self.bias = zeros(rng, (num_classes,))

    def __call__(self, pooled: Tensor) -> Tensor:
        return pooled @ self.weight + self.bias


@dataclass
class ParameterPartition:
    frozen: dict[str, Tensor] = field(default_factory=dict)
    tunable: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        overlap = set(self.frozen) & set(self.tunable)
        if overlap:
            raise ValidationError(f"parameters both frozen and tunable: {sorted(overlap)}")

    def labels(self) -> dict[str, str]:
        out = {n: "frozen" for n in self.frozen}
        out.update({n: "tunable" for n in self.tunable})
        return out

    def count(self, which: str) -> int:
        return sum(p.size for p in getattr(self, which).values())


def partition(model: Module) -> ParameterPartition:
    """Split a model's parameters by their current ``requires_grad`` flag."""
    frozen, tunable = {}, {}
    for name, p in model.named_parameters():
        (tunable if p.requires_grad else frozen)[name] = p
    return ParameterPartition(frozen=frozen, tunable=tunable)


def freeze_for_prompt_tuning(model: Module) -> ParameterPartition:
    """Freeze every backbone weight (incl. positional embeddings); keep the rest tunable.

    Idempotent: a second call returns the same partition.
    """
    backbone = getattr(model, "backbone", None)
    if not isinstance(backbone, VisionTransformer):
        raise ValidationError("model has no backbone to freeze")
    frozen_ids = {id(p) for p in backbone.parameters()}
    for name, p in model.named_parameters():
        p.requires_grad = id(p) not in frozen_ids
        if not p.requires_grad:
            p.grad = None
    return partition(model)


class PretrainClassifier(Module):
    """Backbone plus a pretraining head; every parameter trains."""

    def __init__(self, backbone: VisionTransformer, num_classes: int, rng: np.random.Generator | None):
        self.backbone = backbone
        self.head = LinearHead(backbone.cfg.embed_dim, num_classes, rng)

    def __call__(self, images) -> tuple[Tensor, None]:
        return self.head(self.backbone.features(images)), None


def pretrain_forward(model: PretrainClassifier, images) -> Tensor:
    return model(images)[0]
