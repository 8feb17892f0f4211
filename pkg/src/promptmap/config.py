"""Run configuration: one YAML document, strict keys, field-level errors."""

from __future__ import annotations

import dataclasses
import difflib
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .backbone import BackboneConfig
from .data import SyntheticTaskSpec
from .errors import ConfigError, ValidationError
from .prompting import PromptConfig
from .training import TrainConfig

METHODS = ("sa2vp", "sequential", "head_only", "full_finetune")


@dataclass
class DataConfig:
    """Synthetic task parameters, or ``folder`` to read images from disk."""

    variant: str = "task_B_transfer"
    num_classes: int = 4
    samples_per_class: int = 250
    seed: int = 0
    noise_level: float = 0.0
    folder: str | None = None

    def task_spec(self, backbone: BackboneConfig) -> SyntheticTaskSpec:
        return SyntheticTaskSpec(
            variant=self.variant, image_size=backbone.image_size, num_classes=self.num_classes,
            samples_per_class=self.samples_per_class, seed=self.seed, noise_level=self.noise_level,
            cell_size=backbone.patch_size, channels=backbone.channels,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RunConfig:
    seed: int = 0
    method: str = "sa2vp"
    out: str = "runs/default"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    prompt: PromptConfig = field(default_factory=PromptConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method: must be one of {METHODS}, got {self.method!r}")
        if self.method == "sa2vp":
            self.prompt.resolved_prompt_layers(self.backbone.num_layers)
            self.prompt.resolved_interaction_layers(self.backbone.num_layers)
            if self.backbone.grid % self.prompt.scale:
                raise ConfigError(
                    f"prompt.scale: {self.prompt.scale} does not divide the {self.backbone.grid}x{self.backbone.grid} token grid"
                )
            t = self.prompt.resolved_t(self.backbone.embed_dim)
            if not 1 <= t <= self.backbone.embed_dim // 4:
                raise ConfigError(f"prompt.t: bottleneck {t} must lie in [1, embed_dim/4]")
        # the run seed drives training order; data keeps its own seed
        self.train.seed = self.seed

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "method": self.method, "out": self.out,
            "backbone": self.backbone.to_dict(), "prompt": self.prompt.to_dict(),
            "train": self.train.to_dict(), "data": self.data.to_dict(),
        }

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


SECTIONS = {"backbone": BackboneConfig, "prompt": PromptConfig, "train": TrainConfig, "data": DataConfig}
TOP_LEVEL = ("seed", "method", "out")


def _suggest(key: str, options) -> str:
    close = difflib.get_close_matches(key, list(options), n=1)
    return f" (did you mean {close[0]!r}?)" if close else ""


def _coerce(where: str, value, hint):
    """Check a YAML scalar/list against a (simple) type annotation."""
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or str(origin) == "<class 'types.UnionType'>":
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(where, value, inner[0])
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(_coerce(f"{where}[{i}]", v, args[0]) for i, v in enumerate(value))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def _build_section(name: str, cls, raw) -> object:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected a mapping, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"{name}.{key}: unknown key{_suggest(key, known)}")
        kwargs[key] = _coerce(f"{name}.{key}", value, hints[key])
    try:
        return cls(**kwargs)
    except ValidationError as exc:
        msg = str(exc)
        raise ConfigError(msg if msg.startswith(f"{name}.") else f"{name}: {msg}") from exc


def from_dict(raw: dict | None) -> RunConfig:
    raw = dict(raw or {})
    allowed = set(TOP_LEVEL) | set(SECTIONS)
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"{key}: unknown key{_suggest(key, allowed)}")
    kwargs = {}
    hints = typing.get_type_hints(RunConfig)
    for key in TOP_LEVEL:
        if key in raw:
            kwargs[key] = _coerce(key, raw[key], hints[key])
    for name, cls in SECTIONS.items():
        kwargs[name] = _build_section(name, cls, raw.get(name))
    return RunConfig(**kwargs)


def load_config(path: str | Path | None) -> dict:
    """Raw mapping from a YAML file (empty when ``path`` is None)."""
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return raw


def apply_overrides(raw: dict, overrides: dict[str, object]) -> dict:
    """Set dotted keys (``"prompt.c"``) on a copy of a raw mapping; None values are skipped."""
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in raw.items()}
    for dotted, value in overrides.items():
        if value is None:
            continue
        if "." in dotted:
            section, key = dotted.split(".", 1)
            node = out.get(section)
            if node is None:
                node = out[section] = {}
            node[key] = value
        else:
            out[dotted] = value
    return out
