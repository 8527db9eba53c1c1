import struct

import numpy as np
import pytest

from crispe.data import (LabeledDataset, idx_bytes, load_idx, parse_idx, synthetic_tasks, task_supports,
                         write_idx)
from crispe.errors import ParseError, ValidationError


def _fixture_one_image():
    """Hand-written IDX bytes: one 28x28 zero image labelled 3."""
    images = bytes([0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 28, 0, 0, 0, 28]) + bytes(784)
    labels = bytes([0, 0, 8, 1, 0, 0, 0, 1, 3])
    return images, labels


def test_idx_fixture(tmp_path):
    img, lab = _fixture_one_image()
    (tmp_path / "img").write_bytes(img)
    (tmp_path / "lab").write_bytes(lab)
    ds = load_idx(tmp_path / "img", tmp_path / "lab")
    assert len(ds) == 1 and ds.dim == 784
    assert not ds.inputs.any()
    assert ds.labels.tolist() == [3]
    assert ds.provenance == "idx_file"


def test_idx_encoder_matches_fixture():
    img, lab = _fixture_one_image()
    assert idx_bytes(np.zeros((1, 28, 28)), np.array([3])) == (img, lab)


def test_idx_scaling(tmp_path):
    pixels = np.array([[[0, 255], [51, 102]]], dtype=np.uint8)
    write_idx(tmp_path / "i", tmp_path / "l", pixels, np.array([7]))
    ds = load_idx(tmp_path / "i", tmp_path / "l")
    np.testing.assert_allclose(ds.inputs, [[0.0, 1.0, 0.2, 0.4]])


def test_idx_count_mismatch():
    img, _ = _fixture_one_image()
    lab = bytes([0, 0, 8, 1, 0, 0, 0, 2, 3, 4])
    with pytest.raises(ParseError, match="count"):
        parse_idx(img, lab)


def test_idx_wrong_magic():
    img, lab = _fixture_one_image()
    with pytest.raises(ParseError, match="magic") as info:
        parse_idx(lab, img)
    assert info.value.offset == 0


@pytest.mark.parametrize("cut", [2, 10, 100])
def test_idx_truncated(cut):
    img, lab = _fixture_one_image()
    with pytest.raises(ParseError, match="truncated") as info:
        parse_idx(img[:cut], lab)
    assert info.value.offset == cut


def test_idx_trailing_bytes():
    img, lab = _fixture_one_image()
    with pytest.raises(ParseError, match="trailing"):
        parse_idx(img, lab + b"\x00")


def test_idx_labels_beyond_classes_widen():
    img, lab = idx_bytes(np.zeros((2, 1, 1)), np.array([0, 12]))
    assert parse_idx(img, lab).n_classes == 13


# ------------------------------------------------------------- synthetic


def test_synthetic_deterministic():
    a1, b1 = synthetic_tasks(5, 200, 40, 10)
    a2, b2 = synthetic_tasks(5, 200, 40, 10)
    np.testing.assert_array_equal(a1.inputs, a2.inputs)
    np.testing.assert_array_equal(b1.labels, b2.labels)


def test_synthetic_seeds_differ():
    a1, _ = synthetic_tasks(5, 200, 40, 10)
    a2, _ = synthetic_tasks(6, 200, 40, 10)
    assert not np.allclose(a1.inputs.mean(0), a2.inputs.mean(0))


def test_synthetic_shapes_and_balance():
    A, B = synthetic_tasks(0, 300, 40, 10)
    for ds in (A, B):
        assert ds.inputs.shape == (300, 40)
        assert ds.inputs.min() >= 0.0 and ds.inputs.max() <= 1.0
        np.testing.assert_array_equal(np.bincount(ds.labels), np.full(10, 30))


def test_synthetic_structure():
    """Class means sit on each task's block; shared features copy A's next class into B."""
    A, B = synthetic_tasks(1, 4000, 40, 10, sigma=0.02)
    mask_a, mask_b = task_supports(40, 0.5)
    mean = lambda ds: np.array([ds.inputs[ds.labels == c].mean(0) for c in range(10)])
    ma, mb = mean(A), mean(B)
    np.testing.assert_allclose(ma[:, ~mask_a], 0.05, atol=0.01)
    np.testing.assert_allclose(mb[:, ~mask_b], 0.05, atol=0.01)
    shared = mask_a & mask_b
    np.testing.assert_allclose(mb[:, shared], ma[(np.arange(10) + 1) % 10][:, shared], atol=0.01)
    gaps = np.linalg.norm(np.vstack([ma, mb])[:, None] - np.vstack([ma, mb])[None], axis=-1)
    assert gaps[~np.eye(20, dtype=bool)].min() >= 6 * 0.02 * 0.9


def test_task_supports():
    a, b = task_supports(40, 0.5)
    assert (a & b).sum() == 20 and (a | b).all()
    a, b = task_supports(10, 0.0)
    assert not (a & b).any()


@pytest.mark.parametrize("kwargs", [dict(d=5, m=10), dict(n_per_task=3), dict(overlap=1.0), dict(overlap=-0.1)])
def test_synthetic_errors(kwargs):
    args = dict(seed=0, n_per_task=100, d=40, m=10) | kwargs
    with pytest.raises(ValidationError):
        synthetic_tasks(**args)


# ------------------------------------------------------------- datasets


def test_split_take_chunks():
    ds = LabeledDataset(np.arange(24.0).reshape(12, 2), np.arange(12) % 3, 3)
    train, held = ds.split(0.25, seed=0)
    assert len(train) == 9 and len(held) == 3
    assert sorted(train.inputs[:, 0].tolist() + held.inputs[:, 0].tolist()) == ds.inputs[:, 0].tolist()
    a, _ = ds.split(0.25, seed=0)
    np.testing.assert_array_equal(a.inputs, train.inputs)
    assert len(ds.take(5)) == 5 and len(ds.take(50)) == 12
    assert [len(c) for c in ds.chunks(5)] == [5, 5, 2]


def test_dataset_validation():
    with pytest.raises(ValidationError):
        LabeledDataset(np.zeros((3, 2)), np.zeros(2, int), 2)
    with pytest.raises(ValidationError):
        LabeledDataset(np.zeros((2, 2)), np.array([0, 2]), 2)
