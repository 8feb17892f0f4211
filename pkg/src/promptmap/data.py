"""Synthetic spatial-classification tasks and an image-folder loader.

Shapes are drawn without antialiasing inside cells that coincide with the
backbone's patches, so a shape belongs to exactly one token.

* ``task_A_pretrain``: label = which shape is drawn (1-3 copies, random cells).
* ``task_B_transfer``: a square and a circle; label = where the square sits
  relative to the circle. Colours are random, so only arrangement matters.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError

log = logging.getLogger(__name__)

SHAPES = ("square", "circle", "triangle", "cross", "plus", "ring", "diamond", "bar")
RELATIONS = (
    "left_of", "right_of", "above", "below",
    "above_left", "above_right", "below_left", "below_right",
)
# (sign of circle_row - square_row, sign of circle_col - square_col)
_RELATION_SIGNS = {
    "left_of": (0, 1), "right_of": (0, -1), "above": (1, 0), "below": (-1, 0),
    "above_left": (1, 1), "above_right": (1, -1), "below_left": (-1, 1), "below_right": (-1, -1),
}
VARIANTS = ("task_A_pretrain", "task_B_transfer")
IMAGE_SUFFIXES = {".ppm", ".pgm", ".pnm", ".png", ".bmp", ".jpg", ".jpeg"}


def stencil(name: str, cell: int) -> np.ndarray:
    """Boolean mask of a shape inside a cell x cell block (1-pixel margin)."""
    i, j = np.mgrid[0:cell, 0:cell]
    lo, hi = 1, cell - 2
    inner = (i >= lo) & (i <= hi) & (j >= lo) & (j <= hi)
    mid = (cell - 1) / 2
    r = (cell - 2) / 2
    if name == "square":
        return inner
    if name == "circle":
        return inner & ((i - mid) ** 2 + (j - mid) ** 2 <= (r - 0.0) ** 2)
    if name == "triangle":
        return inner & (np.abs(j - mid) <= (i - lo + 1) / 2)
    if name == "cross":
        return inner & ((np.abs(i - j) < 1) | (np.abs(i + j - (cell - 1)) < 1))
    if name == "plus":
        return inner & ((np.abs(i - mid) < 1) | (np.abs(j - mid) < 1))
    if name == "ring":
        return inner & ((i == lo) | (i == hi) | (j == lo) | (j == hi))
    if name == "diamond":
        return inner & (np.abs(i - mid) + np.abs(j - mid) <= r)
    if name == "bar":
        return inner & (np.abs(i - mid) < 1)
    raise ValidationError(f"unknown shape {name!r}")


@dataclass(frozen=True)
class SyntheticTaskSpec:
    variant: str = "task_B_transfer"
    image_size: int = 32
    num_classes: int = 4
    samples_per_class: int = 250
    seed: int = 0
    noise_level: float = 0.0
    cell_size: int = 8
    channels: int = 3
    train_fraction: float = 0.8
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"data.variant must be one of {VARIANTS}, got {self.variant!r}")
        vocab = SHAPES if self.variant == "task_A_pretrain" else RELATIONS
        if not 2 <= self.num_classes <= len(vocab):
            raise ValidationError(
                f"{self.variant} supports 2..{len(vocab)} classes, got {self.num_classes}"
            )
        if self.image_size % self.cell_size:
            raise ValidationError("data.image_size must be a multiple of data.cell_size")
        if self.image_size // self.cell_size < 2:
            raise ValidationError("need at least a 2x2 grid of cells")
        if self.samples_per_class < 3:
            raise ValidationError("data.samples_per_class must be >= 3")
        if self.noise_level < 0:
            raise ValidationError("data.noise_level must be >= 0")
        if not (0 < self.train_fraction < 1 and 0 <= self.val_fraction < 1
                and self.train_fraction + self.val_fraction < 1):
            raise ValidationError("split fractions must leave a non-empty test split")

    @property
    def grid(self) -> int:
        return self.image_size // self.cell_size

    @property
    def class_names(self) -> list[str]:
        vocab = SHAPES if self.variant == "task_A_pretrain" else RELATIONS
        return list(vocab[: self.num_classes])

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    images: np.ndarray  # (n, C, H, W) in [0, 1]
    labels: np.ndarray  # (n,) int64
    class_names: list[str]

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValidationError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ValidationError("label outside the class list")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, index) -> Dataset:
        return Dataset(self.images[index], self.labels[index], list(self.class_names))

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            yield self.images[idx], self.labels[idx]


@dataclass
class DatasetSplits:
    train: Dataset
    val: Dataset
    test: Dataset

    def items(self):
        return (("train", self.train), ("val", self.val), ("test", self.test))


def _colour(rng: np.random.Generator, channels: int) -> np.ndarray:
    # multiples of 1/255 so 8-bit export is lossless at zero noise
    return rng.integers(100, 256, size=channels) / 255.0


def _paint(img: np.ndarray, shape: str, cell_xy: tuple[int, int], cell: int, colour: np.ndarray) -> None:
    x, y = cell_xy
    mask = stencil(shape, cell)
    block = img[:, x * cell:(x + 1) * cell, y * cell:(y + 1) * cell]
    block[:, mask] = colour[:, None]


def _relation_cells(rng: np.random.Generator, relation: str, grid: int) -> tuple[tuple[int, int], tuple[int, int]]:
    """Random (square_cell, circle_cell) satisfying ``relation``."""
    sr, sc = _RELATION_SIGNS[relation]

    def pair(sign):
        if sign == 0:
            v = int(rng.integers(grid))
            return v, v
        a, b = sorted(rng.choice(grid, size=2, replace=False).tolist())
        return (a, b) if sign > 0 else (b, a)

    (r_sq, r_ci), (c_sq, c_ci) = pair(sr), pair(sc)
    return (r_sq, c_sq), (r_ci, c_ci)


def render(spec: SyntheticTaskSpec, label: int, rng: np.random.Generator) -> np.ndarray:
    cell, grid = spec.cell_size, spec.grid
    img = np.zeros((spec.channels, spec.image_size, spec.image_size))
    if spec.variant == "task_A_pretrain":
        shape = SHAPES[label]
        copies = int(rng.integers(1, 4))
        cells = rng.choice(grid * grid, size=min(copies, grid * grid), replace=False)
        for flat in cells:
            _paint(img, shape, (int(flat) // grid, int(flat) % grid), cell, _colour(rng, spec.channels))
    else:
        square, circle = _relation_cells(rng, RELATIONS[label], grid)
        _paint(img, "square", square, cell, _colour(rng, spec.channels))
        _paint(img, "circle", circle, cell, _colour(rng, spec.channels))
    if spec.noise_level > 0:
        img = np.clip(img + rng.normal(0.0, spec.noise_level, img.shape), 0.0, 1.0)
    return img


def generate(spec: SyntheticTaskSpec) -> DatasetSplits:
    """Deterministic, class-balanced, duplicate-free train/val/test splits."""
    rng = np.random.default_rng(spec.seed)
    seen: set[bytes] = set()
    per_class: list[list[np.ndarray]] = []
    for label in range(spec.num_classes):
        images = []
        attempts = 0
        while len(images) < spec.samples_per_class:
            attempts += 1
            if attempts > 50 * spec.samples_per_class:
                raise ValidationError("could not draw enough distinct images; lower samples_per_class")
            img = render(spec, label, rng)
            key = hashlib.sha1(img.tobytes()).digest()
            if key in seen:
                continue
            seen.add(key)
            images.append(img)
        per_class.append(images)

    n_train = int(round(spec.samples_per_class * spec.train_fraction))
    n_val = int(round(spec.samples_per_class * spec.val_fraction))
    parts = {"train": ([], []), "val": ([], []), "test": ([], [])}
    for label, images in enumerate(per_class):
        order = rng.permutation(len(images))
        chunks = {"train": order[:n_train], "val": order[n_train:n_train + n_val], "test": order[n_train + n_val:]}
        for split, idx in chunks.items():
            parts[split][0].extend(images[i] for i in idx)
            parts[split][1].extend([label] * len(idx))
    names = spec.class_names
    out = {}
    for split, (imgs, labels) in parts.items():
        # interleave classes deterministically
        order = rng.permutation(len(labels))
        imgs_arr = np.stack(imgs)[order] if imgs else np.zeros((0, spec.channels, spec.image_size, spec.image_size))
        out[split] = Dataset(imgs_arr, np.asarray(labels, dtype=np.int64)[order], names)
    return DatasetSplits(**out)


def oracle_relation(image: np.ndarray, cell: int, threshold: float = 0.35) -> int:
    """Hand-coded task-B classifier: locate the two inked cells by centroid.

    The square is the cell with more ink. Returns an index into RELATIONS,
    or -1 when fewer than two inked cells are found.
    """
    ink = image.max(axis=0) > threshold
    h, w = ink.shape
    gh, gw = h // cell, w // cell
    counts = ink.reshape(gh, cell, gw, cell).sum(axis=(1, 3))
    flat = np.argsort(counts, axis=None, kind="stable")[::-1][:2]
    if counts.reshape(-1)[flat[1]] == 0:
        return -1
    cells = [divmod(int(f), gw) for f in flat]
    centroids = []
    for cx, cy in cells:
        block = ink[cx * cell:(cx + 1) * cell, cy * cell:(cy + 1) * cell]
        rows, cols = np.nonzero(block)
        centroids.append((cx * cell + rows.mean(), cy * cell + cols.mean()))
    (sq_r, sq_c), (ci_r, ci_c) = centroids  # most ink first: the square
    half = cell / 2
    dr = 0 if abs(ci_r - sq_r) < half else int(np.sign(ci_r - sq_r))
    dc = 0 if abs(ci_c - sq_c) < half else int(np.sign(ci_c - sq_c))
    for i, name in enumerate(RELATIONS):
        if _RELATION_SIGNS[name] == (dr, dc):
            return i
    return -1


# folders ---------------------------------------------------------------

def export_folder(dataset: Dataset, root: str | Path) -> Path:
    """Write ``root/<class_name>/<id>.ppm`` plus ``root/manifest.jsonl``."""
    from PIL import Image

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (img, label) in enumerate(zip(dataset.images, dataset.labels)):
        name = dataset.class_names[int(label)]
        folder = root / name
        folder.mkdir(exist_ok=True)
        pixels = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
        pixels = pixels[0] if pixels.shape[0] == 1 else pixels.transpose(1, 2, 0)
        rel = Path(name) / f"{i:05d}.ppm"
        Image.fromarray(pixels).save(root / rel, format="PPM")
        lines.append(json.dumps({"path": rel.as_posix(), "label": int(label)}))
    for name in dataset.class_names:
        (root / name).mkdir(exist_ok=True)
    (root / "manifest.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""))
    return root


def load_folder(path: str | Path, image_size: int | None = None, channels: int = 3) -> Dataset:
    """Class-per-subdirectory image folder; labels follow sorted directory names."""
    from PIL import Image, UnidentifiedImageError

    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset folder not found: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise ValidationError(f"no class subdirectories in {root}")
    images, labels = [], []
    mode = "L" if channels == 1 else "RGB"
    for label, folder in enumerate(class_dirs):
        files = sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            log.warning("class directory %s is empty", folder)
        for file in files:
            try:
                with Image.open(file) as im:
                    im = im.convert(mode)
                    if image_size is not None and im.size != (image_size, image_size):
                        im = im.resize((image_size, image_size), Image.BILINEAR)
                    arr = np.asarray(im, dtype=np.float64) / 255.0
            except (UnidentifiedImageError, OSError) as exc:
                log.warning("skipping undecodable image %s: %s", file, exc)
                continue
            arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
            images.append(arr)
            labels.append(label)
    if images:
        shapes = {a.shape for a in images}
        if len(shapes) > 1:
            raise ValidationError(f"images differ in size {sorted(shapes)}; set image_size to resize")
        stacked = np.stack(images)
    else:
        size = image_size or 0
        stacked = np.zeros((0, channels, size, size))
    return Dataset(stacked, np.asarray(labels, dtype=np.int64), [p.name for p in class_dirs])


def load_splits(path: str | Path, image_size: int | None = None, channels: int = 3, seed: int = 0,
                train_fraction: float = 0.8, val_fraction: float = 0.1) -> DatasetSplits:
    """``path/{train,val,test}`` folders if present, else a stratified split of ``path``."""
    root = Path(path)
    if all((root / s).is_dir() for s in ("train", "val", "test")):
        return DatasetSplits(*(load_folder(root / s, image_size, channels) for s in ("train", "val", "test")))
    full = load_folder(root, image_size, channels)
    rng = np.random.default_rng(seed)
    parts = {"train": [], "val": [], "test": []}
    for label in range(full.num_classes):
        idx = rng.permutation(np.flatnonzero(full.labels == label))
        n_train = int(round(len(idx) * train_fraction))
        n_val = int(round(len(idx) * val_fraction))
        parts["train"].extend(idx[:n_train])
        parts["val"].extend(idx[n_train:n_train + n_val])
        parts["test"].extend(idx[n_train + n_val:])
    return DatasetSplits(**{k: full.subset(np.sort(np.asarray(v, dtype=np.intp))) for k, v in parts.items()})
