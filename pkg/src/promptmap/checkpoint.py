"""Checkpoints as safetensors files with JSON metadata.

The metadata carries the resolved run config, the method name and the
frozen/tunable label of every tensor, so a checkpoint is self-describing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from safetensors import SafetensorError
from safetensors.numpy import load_file, save_file

from .backbone import partition
from .errors import ValidationError
from .numerics import Module

FORMAT_VERSION = "1"


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    method: str
    config: dict = field(default_factory=dict)
    labels: dict[str, str] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def backbone_state(self) -> dict[str, np.ndarray]:
        """Backbone tensors with the ``backbone.`` prefix stripped."""
        prefix = "backbone."
        out = {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}
        if not out:
            raise ValidationError("checkpoint holds no backbone tensors")
        return out


def save_checkpoint(path: str | Path, model: Module, method: str, config: dict | None = None,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {n: np.ascontiguousarray(p.data) for n, p in model.named_parameters()}
    meta = {
        "format_version": FORMAT_VERSION,
        "method": method,
        "config": json.dumps(config or {}, sort_keys=True),
        "partition": json.dumps(partition(model).labels(), sort_keys=True),
        "extra": json.dumps(extra or {}, sort_keys=True),
    }
    save_file(tensors, str(path), metadata=meta)
    return path


def read_metadata(path: Path) -> dict[str, str]:
    from safetensors import safe_open

    with safe_open(str(path), framework="numpy") as fh:
        return fh.metadata() or {}


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"checkpoint not found: {path}")
    try:
        tensors = load_file(str(path))
        meta = read_metadata(path)
    except (SafetensorError, OSError, ValueError) as exc:
        raise ValidationError(f"cannot read checkpoint {path}: {exc}") from exc
    if "method" not in meta:
        raise ValidationError(f"{path} is not a promptmap checkpoint (no method metadata)")
    return Checkpoint(
        tensors=tensors,
        method=meta["method"],
        config=json.loads(meta.get("config", "{}")),
        labels=json.loads(meta.get("partition", "{}")),
        extra=json.loads(meta.get("extra", "{}")),
    )


def restore(model: Module, ckpt: Checkpoint, strict: bool = True) -> None:
    """Load tensors and re-apply the stored frozen/tunable labels."""
    model.load_state_dict(ckpt.tensors, strict=strict)
    if ckpt.labels:
        for name, p in model.named_parameters():
            if name in ckpt.labels:
                p.requires_grad = ckpt.labels[name] == "tunable"
