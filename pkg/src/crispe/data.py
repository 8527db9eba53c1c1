"""Datasets: IDX files (MNIST-style) and seeded synthetic task pairs."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class LabeledDataset:
    inputs: np.ndarray  # n x d, features in [0, 1]
    labels: np.ndarray  # n class indices
    n_classes: int
    provenance: str = "synthetic"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or len(self.inputs) != len(self.labels):
            raise ValidationError("inputs must be n x d with one label per row")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValidationError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.n_classes, self.provenance)

    def take(self, n: int) -> "LabeledDataset":
        return self.subset(np.arange(min(n, len(self))))

    def split(self, fraction: float, seed: int) -> tuple["LabeledDataset", "LabeledDataset"]:
        """Seeded shuffle into (train, held-out) with ``fraction`` held out."""
        order = np.random.default_rng(seed).permutation(len(self))
        n_out = int(round(fraction * len(self)))
        return self.subset(np.sort(order[n_out:])), self.subset(np.sort(order[:n_out]))

    def chunks(self, size: int) -> list["LabeledDataset"]:
        return [self.subset(np.arange(i, min(i + size, len(self)))) for i in range(0, len(self), size)]


# --------------------------------------------------------------------- IDX


def _read_idx(data: bytes, expected_magic: int, what: str) -> tuple[tuple[int, ...], np.ndarray]:
    if len(data) < 4:
        raise ParseError(f"{what}: truncated header", len(data))
    magic = struct.unpack(">I", data[:4])[0]
    if magic != expected_magic:
        raise ParseError(f"{what}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise ParseError(f"{what}: truncated dimension header", len(data))
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = int(np.prod(dims))
    if len(data) < header + count:
        raise ParseError(f"{what}: truncated payload, need {count} bytes after header", len(data))
    if len(data) > header + count:
        raise ParseError(f"{what}: {len(data) - header - count} trailing bytes", header + count)
    return dims, np.frombuffer(data, dtype=np.uint8, count=count, offset=header)


def parse_idx(image_bytes: bytes, label_bytes: bytes, n_classes: int = 10) -> LabeledDataset:
    dims, pixels = _read_idx(image_bytes, IDX_IMAGES_MAGIC, "images")
    (n_labels,), labels = _read_idx(label_bytes, IDX_LABELS_MAGIC, "labels")
    if dims[0] != n_labels:
        raise ParseError(f"image count {dims[0]} does not match label count {n_labels}", 4)
    n = dims[0]
    X = pixels.reshape(n, -1).astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    if n and y.max() >= n_classes:
        n_classes = int(y.max()) + 1
    return LabeledDataset(X, y, n_classes, provenance="idx_file")


def load_idx(images_path: str | Path, labels_path: str | Path, n_classes: int = 10) -> LabeledDataset:
    return parse_idx(Path(images_path).read_bytes(), Path(labels_path).read_bytes(), n_classes)


def idx_bytes(pixels: np.ndarray, labels: np.ndarray) -> tuple[bytes, bytes]:
    """Encode ``n x rows x cols`` uint8 images and uint8 labels as IDX."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    img = struct.pack(">I", IDX_IMAGES_MAGIC) + struct.pack(">III", *pixels.shape) + pixels.tobytes()
    lab = struct.pack(">I", IDX_LABELS_MAGIC) + struct.pack(">I", labels.shape[0]) + labels.tobytes()
    return img, lab


def write_idx(images_path: str | Path, labels_path: str | Path, pixels: np.ndarray, labels: np.ndarray) -> None:
    img, lab = idx_bytes(pixels, labels)
    Path(images_path).write_bytes(img)
    Path(labels_path).write_bytes(lab)


# --------------------------------------------------------------- synthetic


def _separated_means(rng: np.random.Generator, m: int, d: int, low: float, high: float,
                     min_dist: float) -> np.ndarray:
    means: list[np.ndarray] = []
    for _ in range(100_000):
        c = rng.uniform(low, high, d)
        if all(np.linalg.norm(c - o) >= min_dist for o in means):
            means.append(c)
            if len(means) == m:
                return np.array(means)
    raise ValidationError("could not place well-separated class means; lower m or raise d")


def task_supports(d: int, overlap: float) -> tuple[np.ndarray, np.ndarray]:
    """Boolean feature masks for tasks A and B; they share ``round(overlap * d)`` features."""
    shared = int(round(overlap * d))
    width = (d + shared + 1) // 2
    mask_a = np.zeros(d, dtype=bool)
    mask_b = np.zeros(d, dtype=bool)
    mask_a[:width] = True
    mask_b[d - width:] = True
    return mask_a, mask_b


def synthetic_tasks(seed: int, n_per_task: int, d: int, m: int, sigma: float = 0.05,
                    overlap: float = 0.5, background: float = 0.05,
                    ) -> tuple[LabeledDataset, LabeledDataset]:
    """Two interfering Gaussian-mixture tasks over one feature space and label set.

    Each task's class means vary on its own block of features and sit at
    ``background`` elsewhere, the way two image datasets light up different
    pixels. The blocks share a fraction ``overlap`` of the features, and on
    those shared features task B's class ``c`` copies task A's class
    ``c + 1``: fitting B with unconstrained updates therefore relabels part
    of A, while B's private features leave room for an edit that spares A.

    Every class mean, across both tasks, is at least ``6 sigma`` from every
    other, so each task alone has Bayes accuracy near 1. Classes are
    balanced and features are clipped to ``[0, 1]``.
    """
    if d < m:
        raise ValidationError(f"need d >= m, got d={d}, m={m}")
    if n_per_task < m:
        raise ValidationError("n_per_task must cover every class at least once")
    if not 0.0 <= overlap < 1.0:
        raise ValidationError(f"overlap must lie in [0, 1), got {overlap!r}")
    rng = np.random.default_rng(seed)
    low, high = 0.15, 0.85
    sep = 6 * sigma
    mask_a, mask_b = task_supports(d, overlap)
    shared = mask_a & mask_b
    for _ in range(100):
        means_a = np.full((m, d), background)
        means_b = np.full((m, d), background)
        means_a[:, mask_a] = _separated_means(rng, m, int(mask_a.sum()), low, high, 4 * sep)
        means_b[:, mask_b] = _separated_means(rng, m, int(mask_b.sum()), low, high, 4 * sep)
        means_b[:, shared] = means_a[(np.arange(m) + 1) % m][:, shared]
        everything = np.vstack([means_a, means_b])
        gaps = np.linalg.norm(everything[:, None] - everything[None], axis=-1)
        if gaps[~np.eye(2 * m, dtype=bool)].min() >= sep:
            break
    else:
        raise ValidationError("could not place well-separated class means; lower m or raise d")
    tasks = []
    for means in (means_a, means_b):
        labels = np.arange(n_per_task) % m
        rng.shuffle(labels)
        X = means[labels] + sigma * rng.standard_normal((n_per_task, d))
        tasks.append(LabeledDataset(np.clip(X, 0.0, 1.0), labels, m, "synthetic"))
    return tasks[0], tasks[1]
