"""Datasets: seeded Gaussian blobs, IDX (MNIST-style) files and Dirichlet label-skew shards."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidArgument

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class LabeledDataset:
    inputs: np.ndarray   # (N, input_dim) float64
    labels: np.ndarray   # (N,) int64
    classes: int

    def __post_init__(self):
        if len(self.labels) == 0:
            raise InvalidArgument("dataset is empty")
        if self.inputs.shape[0] != len(self.labels):
            raise InvalidArgument("inputs and labels differ in length")
        if self.labels.min() < 0 or self.labels.max() >= self.classes:
            raise InvalidArgument("label outside [0, classes)")

    def __len__(self):
        return len(self.labels)

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.classes)


def class_centers(classes: int, input_dim: int, separation: float) -> np.ndarray:
    """Vertices of a scaled simplex: class c sits at ``separation * e_c``.

    When there are more classes than input dimensions the centres wrap onto a
    circle of radius ``separation`` in the first two coordinates instead.
    """
    centers = np.zeros((classes, input_dim))
    if classes <= input_dim:
        centers[np.arange(classes), np.arange(classes)] = separation
    else:
        angles = 2 * np.pi * np.arange(classes) / classes
        centers[:, 0] = separation * np.cos(angles)
        centers[:, 1] = separation * np.sin(angles)
    return centers


def gen_synthetic(classes: int, per_class: int, input_dim: int, spread: float, seed,
                  separation: float = 1.0) -> LabeledDataset:
    if classes < 2 or per_class < 1 or input_dim < 2:
        raise InvalidArgument("need classes >= 2, per_class >= 1 and input_dim >= 2")
    if spread < 0:
        raise InvalidArgument("spread must be non-negative")
    rng = np.random.default_rng(seed)
    centers = class_centers(classes, input_dim, separation)
    labels = np.repeat(np.arange(classes), per_class)
    inputs = centers[labels] + spread * rng.standard_normal((labels.size, input_dim))
    order = rng.permutation(labels.size)
    return LabeledDataset(inputs[order], labels[order].astype(np.int64), classes)


def dirichlet_partition(dataset: LabeledDataset, clients: int, alpha: float, seed) -> list[np.ndarray]:
    """Split sample indices into ``clients`` disjoint shards with Dir(alpha) label skew.

    For each class the proportions over clients are drawn from
    Dir(alpha * 1_K) and the shuffled class indices are cut at the rounded
    cumulative proportions.  Empty shards receive one sample from the largest.
    """
    n = len(dataset)
    if alpha <= 0:
        raise InvalidArgument("alpha must be positive")
    if clients < 1:
        raise InvalidArgument("need at least one client")
    if clients > n:
        raise InvalidArgument(f"cannot split {n} samples over {clients} clients")
    rng = np.random.default_rng(seed)
    shards: list[list[int]] = [[] for _ in range(clients)]
    for c in range(dataset.classes):
        idx = np.flatnonzero(dataset.labels == c)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        props = rng.dirichlet(np.full(clients, alpha))
        cuts = np.round(np.cumsum(props) * idx.size).astype(int)[:-1]
        for k, part in enumerate(np.split(idx, cuts)):
            shards[k].extend(part.tolist())
    for k in range(clients):
        if not shards[k]:
            donor = max(range(clients), key=lambda j: len(shards[j]))
            shards[k].append(shards[donor].pop())
    return [np.array(sorted(s), dtype=np.int64) for s in shards]


def label_entropy(labels, classes: int) -> float:
    counts = np.bincount(labels, minlength=classes).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


# ---------------------------------------------------------------------------
# IDX format
# ---------------------------------------------------------------------------

def _read_u32(buf: bytes, offset: int, field: str) -> int:
    if len(buf) < offset + 4:
        raise FormatError(field, "file truncated")
    return struct.unpack_from(">I", buf, offset)[0]


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Read an IDX image/label pair; pixels are scaled to [0, 1]."""
    images = Path(images_path).read_bytes()
    labels = Path(labels_path).read_bytes()

    magic = _read_u32(images, 0, "images.magic")
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError("images.magic", f"expected 0x{IDX_IMAGES_MAGIC:08x}, got 0x{magic:08x}")
    count = _read_u32(images, 4, "images.count")
    rows = _read_u32(images, 8, "images.rows")
    cols = _read_u32(images, 12, "images.cols")
    need = 16 + count * rows * cols
    if len(images) < need:
        raise FormatError("images.pixels", f"expected {need - 16} pixel bytes, got {len(images) - 16}")

    magic = _read_u32(labels, 0, "labels.magic")
    if magic != IDX_LABELS_MAGIC:
        raise FormatError("labels.magic", f"expected 0x{IDX_LABELS_MAGIC:08x}, got 0x{magic:08x}")
    label_count = _read_u32(labels, 4, "labels.count")
    if len(labels) < 8 + label_count:
        raise FormatError("labels.data", f"expected {label_count} label bytes, got {len(labels) - 8}")
    if label_count != count:
        raise FormatError("labels.count", f"{label_count} labels for {count} images")

    pixels = np.frombuffer(images, dtype=np.uint8, count=count * rows * cols, offset=16)
    y = np.frombuffer(labels, dtype=np.uint8, count=count, offset=8).astype(np.int64)
    x = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    return LabeledDataset(x, y, int(y.max()) + 1)


def write_idx(images_path, labels_path, pixels: np.ndarray, labels) -> None:
    """Write uint8 ``pixels`` of shape (N, rows, cols) and their labels as IDX files."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = pixels.shape
    Path(images_path).write_bytes(
        struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + pixels.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())
