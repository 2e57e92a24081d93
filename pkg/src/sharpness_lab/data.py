"""Datasets: synthetic Gaussian blobs, IDX image files, symmetric label noise."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import FormatError

__all__ = ["Dataset", "make_blobs", "load_idx", "read_idx", "write_idx", "corrupt_labels"]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    num_classes: int

    @property
    def train(self):
        return self.x_train, self.y_train

    @property
    def test(self):
        return self.x_test, self.y_test


def make_blobs(classes: int, dim: int, n: int, separation: float = 5.0, seed: int = 0, n_test=None) -> Dataset:
    """Isotropic unit-variance Gaussian blobs.

    Class centers are random directions scaled to norm ``separation``. Labels
    cycle through the classes so every class is (nearly) equally represented.
    """
    if classes < 2 or dim < 1 or n < classes:
        raise ValueError("need classes >= 2, dim >= 1 and n >= classes")
    n_test = n if n_test is None else n_test
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((classes, dim))
    centers *= separation / np.linalg.norm(centers, axis=1, keepdims=True)

    def sample(count):
        y = np.arange(count) % classes
        y = y[rng.permutation(count)]
        x = centers[y] + rng.standard_normal((count, dim))
        return x, y.astype(np.int64)

    x_tr, y_tr = sample(n)
    x_te, y_te = sample(n_test)
    return Dataset(x_tr, y_tr, x_te, y_te, classes)


def _open(path):
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path, expected_magic: int) -> np.ndarray:
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated IDX header", offset=len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX dimensions", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise FormatError(f"{path}: truncated IDX payload, expected {count} bytes", offset=len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray):
    """Write unsigned-byte data in IDX layout (used for fixtures and tests)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def load_idx(images_path, labels_path) -> tuple:
    """Read an IDX image/label pair into ([0, 1] floats, int64 labels)."""
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images_path}: {images.shape[0]} images but {labels.shape[0]} labels")
    return images.astype(np.float64) / 255.0, labels.astype(np.int64)


def corrupt_labels(dataset: Dataset, noise_rate: float, seed: int = 0) -> Dataset:
    """Symmetric label noise on the training split only.

    Each label is replaced with probability ``noise_rate`` by a uniformly
    drawn *different* class.
    """
    if not 0.0 <= noise_rate <= 1.0:
        raise ValueError(f"noise rate must lie in [0, 1], got {noise_rate}")
    rng = np.random.default_rng(seed)
    y = dataset.y_train.copy()
    flip = rng.random(y.shape[0]) < noise_rate
    offsets = rng.integers(1, dataset.num_classes, size=y.shape[0])
    y[flip] = (y[flip] + offsets[flip]) % dataset.num_classes
    return replace(dataset, y_train=y)
