"""Library form of the command-line workflows.

Each ``run_*`` function takes a resolved :class:`RunConfig`, writes its
artifacts under ``cfg.out`` and returns a JSON-serialisable summary.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from .analysis import locality_rate, similarity_map, write_matrix
from .backbone import (
    BackboneConfig,
    PretrainClassifier,
    VisionTransformer,
    freeze_for_prompt_tuning,
    partition,
)
from .checkpoint import Checkpoint, load_checkpoint, restore, save_checkpoint
from .config import RunConfig, from_dict
from .data import DatasetSplits, generate, load_splits
from .errors import ValidationError
from .numerics import Module, default_dtype
from .prompting import DualPathwayModel, LinearProbeModel, SequentialPromptModel
from .training import census, evaluate, fit, format_census, parameter_ratio

log = logging.getLogger(__name__)

CHECKPOINT = "checkpoint.safetensors"
METRICS = "metrics.jsonl"


def load_data(cfg: RunConfig) -> DatasetSplits:
    if cfg.data.folder is not None:
        return load_splits(cfg.data.folder, cfg.backbone.image_size, cfg.backbone.channels, cfg.data.seed)
    return generate(cfg.data.task_spec(cfg.backbone))


def build_model(cfg: RunConfig, num_classes: int, backbone: VisionTransformer | None = None,
                shape_only: bool = False) -> Module:
    """Backbone (fresh unless given) plus the method's tunable parts, frozen accordingly."""
    if backbone is None:
        backbone = VisionTransformer(cfg.backbone, np.random.default_rng(cfg.seed), shape_only=shape_only)
    rng = None if shape_only else np.random.default_rng([cfg.seed, 1])
    if cfg.method == "sa2vp":
        model = DualPathwayModel(backbone, cfg.prompt, num_classes, rng, shape_only=shape_only)
    elif cfg.method == "sequential":
        model = SequentialPromptModel(backbone, cfg.prompt.num_tokens, num_classes, rng,
                                      shape_only=shape_only, noise=cfg.prompt.init_noise)
    else:
        model = LinearProbeModel(backbone, num_classes, rng, shape_only=shape_only, method=cfg.method)
    if cfg.method == "full_finetune":
        for p in model.parameters():
            p.requires_grad = True
    else:
        freeze_for_prompt_tuning(model)
    return model


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.dump())
    return out


def _result(res) -> dict | None:
    return None if res is None else res.to_dict()


def run_pretrain(cfg: RunConfig) -> dict:
    """Train a fresh backbone and pretraining head end to end."""
    out = _prepare_out(cfg)
    with default_dtype(np.dtype(cfg.train.dtype)):
        splits = load_data(cfg)
        backbone = VisionTransformer(cfg.backbone, np.random.default_rng(cfg.seed))
        model = PretrainClassifier(backbone, splits.train.num_classes, np.random.default_rng([cfg.seed, 1]))
        ckpt = out / CHECKPOINT

        def on_best(m, state):
            save_checkpoint(ckpt, m, "pretrain", cfg.to_dict(), {"epoch": state.epoch})

        result = fit(model, splits, cfg.train, metrics_path=out / METRICS, on_best=on_best,
                     dump_dir=out)
        if not ckpt.exists():
            save_checkpoint(ckpt, model, "pretrain", cfg.to_dict())
    summary = {"command": "pretrain", "best_val": result.best_val, "best_epoch": result.best_epoch,
               "val": _result(result.val), "test": _result(result.test),
               "class_names": splits.train.class_names, "checkpoint": str(ckpt)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def backbone_config_for(raw: dict, ckpt: Checkpoint) -> dict:
    """Adopt the checkpoint's backbone settings unless the run config names its own."""
    if "backbone" not in raw and "backbone" in ckpt.config:
        raw = dict(raw)
        raw["backbone"] = ckpt.config["backbone"]
    return raw


def load_backbone(cfg: RunConfig, ckpt: Checkpoint) -> VisionTransformer:
    backbone = VisionTransformer(cfg.backbone, np.random.default_rng(cfg.seed))
    backbone.load_state_dict(ckpt.backbone_state())
    return backbone


def run_tune(cfg: RunConfig, pretrained: Checkpoint) -> dict:
    """Adapt a pretrained backbone to the configured task with ``cfg.method``."""
    out = _prepare_out(cfg)
    with default_dtype(np.dtype(cfg.train.dtype)):
        splits = load_data(cfg)
        backbone = load_backbone(cfg, pretrained)
        model = build_model(cfg, splits.train.num_classes, backbone)
        parts = partition(model)
        ratio = parameter_ratio(model)
        log.info("method %s: tuned/total %.2f%% (%d tunable)", cfg.method, ratio, parts.count("tunable"))
        ckpt = out / CHECKPOINT

        def on_best(m, state):
            save_checkpoint(ckpt, m, cfg.method, cfg.to_dict(),
                            {"epoch": state.epoch, "class_names": splits.train.class_names})

        result = fit(model, splits, cfg.train, parts, metrics_path=out / METRICS, on_best=on_best,
                     dump_dir=out)
        if not ckpt.exists():
            save_checkpoint(ckpt, model, cfg.method, cfg.to_dict(), {"class_names": splits.train.class_names})
    summary = {"command": "tune", "method": cfg.method, "tuned_percent": round(ratio, 4),
               "best_val": result.best_val, "best_epoch": result.best_epoch,
               "val": _result(result.val), "test": _result(result.test), "checkpoint": str(ckpt)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def model_from_checkpoint(ckpt: Checkpoint, cfg: RunConfig | None = None, num_classes: int | None = None) -> Module:
    """Rebuild the model a checkpoint was saved from and load its tensors."""
    cfg = cfg or from_dict(ckpt.config)
    if ckpt.method == "pretrain":
        k = num_classes or len(ckpt.tensors["head.bias"])
        model = PretrainClassifier(VisionTransformer(cfg.backbone, np.random.default_rng(cfg.seed)), k,
                                   np.random.default_rng(0))
    else:
        if cfg.method != ckpt.method:
            cfg = from_dict({**cfg.to_dict(), "method": ckpt.method})
        k = num_classes or len(ckpt.tensors["heads.base.bias"])
        model = build_model(cfg, k)
    restore(model, ckpt)
    return model


def run_eval(cfg: RunConfig, ckpt: Checkpoint) -> dict:
    with default_dtype(np.dtype(cfg.train.dtype)):
        model = model_from_checkpoint(ckpt, cfg)
        splits = load_data(cfg)
        results = {name: evaluate(model, ds, cfg.train.eval_batch_size).to_dict()
                   for name, ds in splits.items() if len(ds) and name != "train"}
    summary = {"command": "eval", "method": ckpt.method, **results}
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(json.dumps(summary, indent=2))
    return summary


def load_image(path: str | Path, cfg: BackboneConfig) -> np.ndarray:
    from PIL import Image

    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"image not found: {path}")
    with Image.open(path) as im:
        im = im.convert("L" if cfg.channels == 1 else "RGB")
        if im.size != (cfg.image_size, cfg.image_size):
            im = im.resize((cfg.image_size, cfg.image_size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)


def run_analyze(cfg: RunConfig, ckpt: Checkpoint, image: str | Path | None = None) -> dict:
    """Write the similarity map for one image; report the locality rate on the test split."""
    if ckpt.method != "sa2vp":
        raise ValidationError(f"analyze needs an sa2vp checkpoint, got method {ckpt.method!r}")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with default_dtype(np.dtype(cfg.train.dtype)):
        model = model_from_checkpoint(ckpt, cfg)
        splits = load_data(cfg)
        probe = load_image(image, cfg.backbone) if image is not None else splits.test.images[0]
        matrix, coord = similarity_map(model, probe)
        rate = locality_rate(model, splits.test.images) if len(splits.test) else None
    path = write_matrix(out / "similarity.txt", matrix)
    peak = np.unravel_index(int(np.argmax(matrix)), matrix.shape)
    log.info("salient token %s, similarity peak %s, locality rate %s", coord, tuple(int(v) for v in peak), rate)
    summary = {"command": "analyze", "salient": list(coord), "peak": [int(v) for v in peak],
               "locality_rate": rate, "matrix": str(path)}
    (out / "analysis.json").write_text(json.dumps(summary, indent=2))
    return summary


def run_census(cfg: RunConfig, ckpt: Checkpoint | None = None, num_classes: int | None = None) -> dict:
    """Parameter report for a checkpoint, or for a shape-only build of ``cfg``."""
    if ckpt is not None:
        model = model_from_checkpoint(ckpt, None, num_classes)
    else:
        k = num_classes or cfg.data.num_classes
        if cfg.data.folder is not None and num_classes is None:
            k = len([p for p in Path(cfg.data.folder).iterdir() if p.is_dir()])
        model = build_model(cfg, k, shape_only=True)
    report = census(model)
    report["text"] = format_census(report)
    return report
