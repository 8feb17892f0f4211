import hashlib
import logging

import numpy as np
import pytest
from PIL import Image

from promptmap.data import (
    RELATIONS,
    SHAPES,
    Dataset,
    SyntheticTaskSpec,
    export_folder,
    generate,
    load_folder,
    load_splits,
    oracle_relation,
    stencil,
)
from promptmap.errors import ValidationError


@pytest.fixture(scope="module")
def task_b():
    return generate(SyntheticTaskSpec(variant="task_B_transfer", num_classes=4, samples_per_class=250, seed=3))


def test_same_seed_bit_identical():
    spec = SyntheticTaskSpec(variant="task_A_pretrain", num_classes=3, samples_per_class=20, seed=9)
    a, b = generate(spec), generate(spec)
    for (_, da), (_, db) in zip(a.items(), b.items()):
        assert np.array_equal(da.images, db.images) and np.array_equal(da.labels, db.labels)
    c = generate(SyntheticTaskSpec(variant="task_A_pretrain", num_classes=3, samples_per_class=20, seed=10))
    assert not np.array_equal(a.train.images, c.train.images)


def test_split_sizes(task_b):
    assert (len(task_b.train), len(task_b.val), len(task_b.test)) == (800, 100, 100)


def test_splits_disjoint(task_b):
    hashes = [{hashlib.sha1(img.tobytes()).digest() for img in ds.images} for _, ds in task_b.items()]
    assert sum(len(h) for h in hashes) == 1000
    assert not (hashes[0] & hashes[1] or hashes[0] & hashes[2] or hashes[1] & hashes[2])


def test_class_balance(task_b):
    for _, ds in task_b.items():
        counts = np.bincount(ds.labels, minlength=4)
        assert counts.max() - counts.min() <= 1


def test_images_in_unit_range(task_b):
    assert task_b.train.images.min() >= 0 and task_b.train.images.max() <= 1
    assert task_b.train.images.shape[1:] == (3, 32, 32)


def test_oracle_solves_task_b_at_zero_noise():
    spec = SyntheticTaskSpec(variant="task_B_transfer", num_classes=8, samples_per_class=60, seed=4)
    for _, ds in generate(spec).items():
        preds = np.array([oracle_relation(img, spec.cell_size) for img in ds.images])
        assert np.array_equal(preds, ds.labels)


def test_oracle_degrades_monotonically_with_noise():
    accs = []
    for noise in (0.0, 0.2, 0.4, 0.6):
        spec = SyntheticTaskSpec(variant="task_B_transfer", num_classes=8, samples_per_class=60, seed=4,
                                 noise_level=noise)
        ds = generate(spec).train
        accs.append(np.mean([oracle_relation(img, 8) == y for img, y in zip(ds.images, ds.labels)]))
    assert accs[0] == 1.0
    assert all(a >= b for a, b in zip(accs, accs[1:]))
    assert accs[-1] < accs[0]


def test_labels_ignore_colour_but_not_arrangement():
    spec = SyntheticTaskSpec(variant="task_B_transfer", num_classes=4, samples_per_class=40, seed=2)
    ds = generate(spec).train
    ink = ds.images.max(axis=1) > 0
    # recolouring (a channel permutation) keeps the oracle's answer
    recoloured = ds.images[:, ::-1]
    for img, rec, y in zip(ds.images[:20], recoloured[:20], ds.labels[:20]):
        assert oracle_relation(rec, 8) == oracle_relation(img, 8) == y
    # mirroring left-right swaps left_of and right_of
    mirrored = ds.images[:, :, :, ::-1]
    for img, y in zip(mirrored, ds.labels):
        name = RELATIONS[y]
        flipped = {"left_of": "right_of", "right_of": "left_of"}.get(name, name)
        assert RELATIONS[oracle_relation(img, 8)] == flipped
    assert ink.any()


def test_task_a_labels_are_shape_identity():
    spec = SyntheticTaskSpec(variant="task_A_pretrain", num_classes=6, samples_per_class=10, seed=1)
    ds = generate(spec).train
    for img, y in zip(ds.images, ds.labels):
        ink = img.max(axis=0) > 0
        cells = ink.reshape(4, 8, 4, 8).transpose(0, 2, 1, 3).reshape(16, 8, 8)
        drawn = [c for c in cells if c.any()]
        assert 1 <= len(drawn) <= 3
        for c in drawn:
            assert np.array_equal(c, stencil(SHAPES[y], 8))


def test_too_many_classes():
    with pytest.raises(ValidationError):
        SyntheticTaskSpec(variant="task_B_transfer", num_classes=9)
    with pytest.raises(ValidationError):
        SyntheticTaskSpec(variant="task_C")


def test_shapes_fit_within_one_cell():
    for name in SHAPES:
        m = stencil(name, 8)
        assert m.any()
        assert not (m[0].any() or m[-1].any() or m[:, 0].any() or m[:, -1].any())


def test_folder_roundtrip(tmp_path):
    spec = SyntheticTaskSpec(variant="task_B_transfer", num_classes=4, samples_per_class=5, seed=0)
    ds = generate(spec).train
    root = export_folder(ds, tmp_path / "exported")
    lines = (root / "manifest.jsonl").read_text().strip().splitlines()
    assert len(lines) == len(ds)
    back = load_folder(root, image_size=32)
    # labels follow sorted directory names
    names = sorted(ds.class_names)
    assert back.class_names == names
    order = {n: i for i, n in enumerate(names)}
    expected = {}
    for img, y in zip(ds.images, ds.labels):
        expected.setdefault(order[ds.class_names[y]], []).append(img)
    got = {}
    for img, y in zip(back.images, back.labels):
        got.setdefault(int(y), []).append(img)
    for k in expected:
        a = np.sort(np.stack(expected[k]).reshape(len(expected[k]), -1), axis=0)
        b = np.sort(np.stack(got[k]).reshape(len(got[k]), -1), axis=0)
        assert np.max(np.abs(a - b)) <= 0.5 / 255 + 1e-12


def _write_images(folder, n, size=(8, 8)):
    folder.mkdir(parents=True)
    for i in range(n):
        Image.fromarray(np.full((*size, 3), (40 * i) % 256, dtype=np.uint8)).save(folder / f"{i}.ppm")


def test_load_folder_two_classes(tmp_path):
    _write_images(tmp_path / "b_second", 3)
    _write_images(tmp_path / "a_first", 3)
    ds = load_folder(tmp_path)
    assert len(ds) == 6 and set(ds.labels.tolist()) == {0, 1}
    assert ds.class_names == ["a_first", "b_second"]
    assert ds.images.shape == (6, 3, 8, 8)


def test_load_folder_missing_path(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_folder(tmp_path / "nope")


def test_load_folder_resizes(tmp_path):
    _write_images(tmp_path / "x", 2, size=(12, 12))
    ds = load_folder(tmp_path, image_size=8)
    assert ds.images.shape == (2, 3, 8, 8)


def test_empty_class_warns_and_bad_file_skipped(tmp_path, caplog):
    _write_images(tmp_path / "good", 2)
    (tmp_path / "empty").mkdir()
    (tmp_path / "good" / "broken.ppm").write_bytes(b"not an image")
    with caplog.at_level(logging.WARNING):
        ds = load_folder(tmp_path)
    assert len(ds) == 2
    assert ds.class_names == ["empty", "good"]
    assert any("empty" in r.message for r in caplog.records)
    assert any("undecodable" in r.message for r in caplog.records)


def test_load_splits_stratifies(tmp_path):
    for name in ("a", "b"):
        _write_images(tmp_path / name, 10)
    splits = load_splits(tmp_path, seed=0)
    assert (len(splits.train), len(splits.val), len(splits.test)) == (16, 2, 2)


def test_dataset_rejects_bad_labels():
    with pytest.raises(ValidationError):
        Dataset(np.zeros((2, 3, 4, 4)), np.array([0, 2]), ["a", "b"])
