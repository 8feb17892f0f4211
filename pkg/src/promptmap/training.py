"""Optimisation loop, evaluation and parameter accounting."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .backbone import ParameterPartition, partition
from .data import Dataset, DatasetSplits
from .errors import ConfigError, ContractError, NumericError, ValidationError
from .numerics import Module, Tensor, backward, cross_entropy, no_grad

log = logging.getLogger(__name__)

SCHEDULES = ("constant", "cosine")
DTYPES = ("float64", "float32")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 64
    epochs: int = 10
    lam: float = 0.7  # weight of the base-pathway loss
    seed: int = 0
    schedule: str = "constant"
    grad_clip: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_batch_size: int = 256
    dtype: str = "float64"

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError("train.learning_rate must be >= 0")
        if self.weight_decay < 0:
            raise ConfigError("train.weight_decay must be >= 0")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("train.batch_size must be positive")
        if self.epochs < 0:
            raise ConfigError("train.epochs must be >= 0")
        check_lambda(self.lam)
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"train.schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("train.grad_clip must be positive or null")
        if self.dtype not in DTYPES:
            raise ConfigError(f"train.dtype must be one of {DTYPES}, got {self.dtype!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def check_lambda(lam: float) -> float:
    lam = float(lam)
    if not 0.0 <= lam <= 1.0:
        raise ValidationError(f"lambda must lie in [0, 1], got {lam}")
    return lam


# loss ------------------------------------------------------------------

def joint_loss(y_r: Tensor, y_p: Tensor | None, y, lam: float, prune: bool = True) -> tuple[Tensor, dict]:
    """lam * CE(base) + (1 - lam) * CE(prompt).

    With ``prune`` a zero-weight term is left out of the graph entirely, so
    the head it feeds receives no gradient and no optimizer update.
    Returns the loss and the two unweighted cross-entropies as floats.
    """
    lam = check_lambda(lam)
    loss_base = cross_entropy(y_r, y)
    parts = {"loss_base": float(loss_base.data), "loss_prompt": None}
    if y_p is None:
        return loss_base, parts
    if y_p.shape != y_r.shape:
        raise ValidationError(f"logit shapes differ: {y_r.shape} vs {y_p.shape}")
    loss_prompt = cross_entropy(y_p, y)
    parts["loss_prompt"] = float(loss_prompt.data)
    if prune and lam == 1.0:
        return loss_base, parts
    if prune and lam == 0.0:
        return loss_prompt, parts
    return loss_base * lam + loss_prompt * (1.0 - lam), parts


# optimizer -------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay over a named set of tunable tensors.

    Tensors whose name ends with a ``no_decay`` suffix skip weight decay.
    A tensor whose ``grad`` is None in a step is left exactly as it was,
    moments included.
    """

    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 no_decay: Callable[[str], bool] | None = None):
        for name, p in params.items():
            if not p.requires_grad:
                raise ContractError(f"optimizer given frozen parameter {name}")
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self._no_decay = no_decay or (lambda name: False)
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.counts = {n: 0 for n in self.params}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.counts[name] += 1
            t = self.counts[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            update = m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay and not self._no_decay(name):
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for n in self.params:
            out[f"m.{n}"] = self.m[n]
            out[f"v.{n}"] = self.v[n]
        return out


def is_scaling_vector(name: str) -> bool:
    return name.startswith("prompt.scales.") and name.endswith(".e")


def clip_gradients(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def learning_rate(cfg: TrainConfig, step: int, total_steps: int) -> float:
    if cfg.schedule == "constant" or total_steps <= 0:
        return cfg.learning_rate
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))


# state -----------------------------------------------------------------

@dataclass
class TrainState:
    optimizer: AdamW
    rng: np.random.Generator
    step: int = 0
    epoch: int = 0
    total_steps: int = 0
    best_val: float = -1.0
    best_epoch: int = -1
    history: list[dict] = field(default_factory=list)


def init_state(model: Module, cfg: TrainConfig, parts: ParameterPartition | None = None) -> TrainState:
    parts = parts if parts is not None else partition(model)
    if not parts.tunable:
        raise ContractError("model has no tunable parameters")
    opt = AdamW(parts.tunable, cfg.learning_rate, cfg.weight_decay, (cfg.beta1, cfg.beta2), cfg.eps,
                no_decay=is_scaling_vector)
    return TrainState(optimizer=opt, rng=np.random.default_rng(cfg.seed))


def _dump_state(model: Module, state: TrainState, dump_dir: Path | None, loss_parts: dict) -> dict:
    info = {"step": state.step, "epoch": state.epoch, **loss_parts}
    if dump_dir is not None:
        dump_dir.mkdir(parents=True, exist_ok=True)
        target = dump_dir / f"numeric_failure_step{state.step}.npz"
        arrays = {n.replace(".", "__"): p.data for n, p in state.optimizer.params.items()}
        np.savez(target, **arrays)
        (dump_dir / f"numeric_failure_step{state.step}.json").write_text(json.dumps(info, indent=2))
        info["dump"] = str(target)
    return info


def train_step(model: Module, batch, cfg: TrainConfig, state: TrainState,
               dump_dir: str | Path | None = None) -> dict:
    """Forward both pathways, joint loss, backward, one optimizer update."""
    images, labels = batch
    dump = Path(dump_dir) if dump_dir is not None else None
    opt = state.optimizer
    opt.zero_grad()
    parts: dict = {}
    try:
        y_r, y_p = model(images)
        loss, parts = joint_loss(y_r, y_p, labels, cfg.lam)
        if not math.isfinite(float(loss.data)):
            raise NumericError(f"non-finite loss {float(loss.data)}")
        backward(loss)
    except NumericError as exc:
        info = _dump_state(model, state, dump, parts)
        raise NumericError(f"numeric failure at step {state.step}: {exc}", state=info) from exc
    if cfg.grad_clip is not None:
        clip_gradients(opt.params.values(), cfg.grad_clip)
    lr = learning_rate(cfg, state.step, state.total_steps)
    opt.step(lr)
    for name, p in opt.params.items():
        if not np.all(np.isfinite(p.data)):
            info = _dump_state(model, state, dump, parts)
            raise NumericError(f"parameter {name} became non-finite at step {state.step}", state=info)
    opt.zero_grad()
    state.step += 1
    acc = float(np.mean(np.argmax(y_r.data, axis=-1) == np.asarray(labels)))
    return {"step": state.step, "split": "train", "loss_base": parts["loss_base"],
            "loss_prompt": parts["loss_prompt"], "loss_all": float(loss.data), "accuracy": acc, "lr": lr}


# evaluation ------------------------------------------------------------

@dataclass
class EvalResult:
    accuracy: float
    per_class: dict[str, float]
    prompt_accuracy: float | None
    loss_base: float
    loss_prompt: float | None
    count: int

    def to_dict(self) -> dict:
        return asdict(self)


def predict(model: Module, images, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray | None]:
    """Base (and prompt, if any) logits without recording gradients."""
    base, prompt = [], []
    with no_grad():
        for start in range(0, len(images), batch_size):
            y_r, y_p = model(images[start:start + batch_size])
            base.append(y_r.data)
            if y_p is not None:
                prompt.append(y_p.data)
    return np.concatenate(base), (np.concatenate(prompt) if prompt else None)


def _nll(logits: np.ndarray, labels: np.ndarray) -> float:
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


def evaluate(model: Module, dataset: Dataset, batch_size: int = 256) -> EvalResult:
    """Accuracy from the base-pathway head; the prompt head is a diagnostic."""
    if len(dataset) == 0:
        raise ValidationError("cannot evaluate on an empty dataset")
    y_r, y_p = predict(model, dataset.images, batch_size)
    labels = dataset.labels
    pred = y_r.argmax(axis=1)
    per_class = {}
    for k, name in enumerate(dataset.class_names):
        sel = labels == k
        if sel.any():
            per_class[name] = float(np.mean(pred[sel] == k))
    return EvalResult(
        accuracy=float(np.mean(pred == labels)),
        per_class=per_class,
        prompt_accuracy=None if y_p is None else float(np.mean(y_p.argmax(axis=1) == labels)),
        loss_base=_nll(y_r, labels),
        loss_prompt=None if y_p is None else _nll(y_p, labels),
        count=len(labels),
    )


# accounting ------------------------------------------------------------

def _tensors(obj, seen: set[int], out: list[Tensor]) -> None:
    """Every distinct Tensor reachable through public attributes and containers."""
    if isinstance(obj, Tensor):
        if id(obj) not in seen:
            seen.add(id(obj))
            out.append(obj)
        return
    if isinstance(obj, dict):
        items = obj.values()
    elif isinstance(obj, (list, tuple)):
        items = obj
    elif isinstance(obj, Module):
        if id(obj) in seen:
            return
        seen.add(id(obj))
        items = [v for k, v in vars(obj).items() if not k.startswith("_")]
    else:
        return
    for item in items:
        _tensors(item, seen, out)


def parameter_counts(model: Module) -> tuple[int, int]:
    """(tunable, total) scalar counts by a fresh walk of the object graph."""
    found: list[Tensor] = []
    _tensors(model, set(), found)
    total = sum(int(np.prod(t.shape)) for t in found)
    tunable = sum(int(np.prod(t.shape)) for t in found if t.requires_grad)
    return tunable, total


def parameter_ratio(model: Module) -> float:
    """100 * tunable / total scalars."""
    tunable, total = parameter_counts(model)
    if total == 0:
        raise ValidationError("model has no parameters")
    return 100.0 * tunable / total


def namespace(name: str) -> str:
    parts = name.split(".")
    if parts[0] == "backbone":
        return "backbone"
    return ".".join(parts[:2]) if len(parts) > 2 else parts[0]


def census(model: Module) -> dict:
    """Per-namespace counts plus frozen/tunable totals and the ratio (2 decimals)."""
    spaces: dict[str, dict[str, int]] = {}
    for name, p in model.named_parameters():
        entry = spaces.setdefault(namespace(name), {"total": 0, "tunable": 0})
        entry["total"] += p.size
        if p.requires_grad:
            entry["tunable"] += p.size
    tunable, total = parameter_counts(model)
    named_total = sum(e["total"] for e in spaces.values())
    if named_total != total:
        raise ContractError(f"named parameters ({named_total}) disagree with traversal ({total})")
    return {
        "namespaces": spaces,
        "tunable": tunable,
        "frozen": total - tunable,
        "total": total,
        "ratio_percent": round(100.0 * tunable / total, 2),
    }


def format_census(report: dict) -> str:
    lines = [f"{'namespace':<24}{'tunable':>12}{'total':>12}"]
    for ns, e in sorted(report["namespaces"].items()):
        lines.append(f"{ns:<24}{e['tunable']:>12}{e['total']:>12}")
    lines.append(f"{'frozen':<24}{report['frozen']:>12}")
    lines.append(f"{'tunable':<24}{report['tunable']:>12}")
    lines.append(f"{'total':<24}{report['total']:>12}")
    lines.append(f"tuned/total: {report['ratio_percent']:.2f}%")
    return "\n".join(lines)


# metrics and loop ------------------------------------------------------

METRIC_KEYS = ("step", "split", "loss_base", "loss_prompt", "loss_all", "accuracy")


class MetricsWriter:
    """Line-delimited JSON records with a fixed key order and no timestamps."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: dict) -> None:
        if self.path is None:
            return
        row = {k: record.get(k) for k in METRIC_KEYS}
        row.update({k: v for k, v in record.items() if k not in row})
        with self.path.open("a") as fh:
            fh.write(json.dumps(row) + "\n")


@dataclass
class FitResult:
    state: TrainState
    best_val: float
    best_epoch: int
    val: EvalResult | None
    test: EvalResult | None


def fit(model: Module, splits: DatasetSplits, cfg: TrainConfig, parts: ParameterPartition | None = None,
        metrics_path: str | Path | None = None, on_best: Callable[[Module, TrainState], None] | None = None,
        dump_dir: str | Path | None = None, log_every: int = 0) -> FitResult:
    """Train for ``cfg.epochs``; keep the tunable weights with the best val accuracy.

    After the loop the model holds those best weights and is evaluated on
    the test split. ``on_best`` fires each time validation improves.
    """
    if len(splits.train) == 0:
        raise ValidationError("training split is empty")
    state = init_state(model, cfg, parts)
    writer = MetricsWriter(metrics_path)
    steps_per_epoch = math.ceil(len(splits.train) / cfg.batch_size)
    state.total_steps = steps_per_epoch * cfg.epochs
    best = {n: p.data.copy() for n, p in state.optimizer.params.items()}
    has_val = len(splits.val) > 0
    for epoch in range(cfg.epochs):
        state.epoch = epoch
        for batch in splits.train.batches(cfg.batch_size, state.rng):
            rec = train_step(model, batch, cfg, state, dump_dir)
            rec["epoch"] = epoch
            writer.write(rec)
            if log_every and state.step % log_every == 0:
                log.info("step %d loss %.4f acc %.3f", state.step, rec["loss_all"], rec["accuracy"])
        if has_val:
            res = evaluate(model, splits.val, cfg.eval_batch_size)
            loss_all = res.loss_base if res.loss_prompt is None else (
                cfg.lam * res.loss_base + (1 - cfg.lam) * res.loss_prompt)
            rec = {"step": state.step, "split": "val", "loss_base": res.loss_base,
                   "loss_prompt": res.loss_prompt, "loss_all": loss_all, "accuracy": res.accuracy,
                   "epoch": epoch, "prompt_accuracy": res.prompt_accuracy}
            writer.write(rec)
            state.history.append(rec)
            log.info("epoch %d val acc %.4f", epoch, res.accuracy)
            if res.accuracy > state.best_val:
                state.best_val, state.best_epoch = res.accuracy, epoch
                best = {n: p.data.copy() for n, p in state.optimizer.params.items()}
                if on_best is not None:
                    on_best(model, state)
    if has_val and cfg.epochs > 0:
        for n, p in state.optimizer.params.items():
            p.data = best[n]
    val = evaluate(model, splits.val, cfg.eval_batch_size) if has_val else None
    test = evaluate(model, splits.test, cfg.eval_batch_size) if len(splits.test) else None
    if test is not None:
        writer.write({"step": state.step, "split": "test", "loss_base": test.loss_base,
                      "loss_prompt": test.loss_prompt, "loss_all": None, "accuracy": test.accuracy})
    return FitResult(state=state, best_val=state.best_val, best_epoch=state.best_epoch, val=val, test=test)
