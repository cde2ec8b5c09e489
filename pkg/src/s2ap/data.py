"""Desk-scale datasets: seeded two-moons and an IDX (MNIST-style) reader/writer."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int
    is_test: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.intp)
        if self.x.ndim != 2 or len(self.x) != len(self.y) or len(self.y) < 1:
            raise ValueError(f"bad dataset shapes x={self.x.shape} y={self.y.shape}")
        if self.y.min() < 0 or self.y.max() >= self.num_classes:
            raise ValueError("labels outside [0, num_classes)")
        if self.x.min() < 0 or self.x.max() > 1:
            raise ValueError("features must lie in [0, 1]")
        if self.is_test is None:
            self.is_test = np.zeros(len(self.y), dtype=bool)

    def _subset(self, sel) -> "Dataset":
        return Dataset(self.x[sel], self.y[sel], self.num_classes, self.is_test[sel])

    @property
    def train(self) -> "Dataset":
        return self._subset(~self.is_test)

    @property
    def test(self) -> "Dataset":
        return self._subset(self.is_test)

    def head(self, n: int) -> "Dataset":
        return self._subset(slice(0, n))

    def __len__(self) -> int:
        return len(self.y)


def moons_raw(n: int, noise: float, rng: np.random.Generator):
    """Unscaled two interleaved half-circles, n/2 per class, before shuffling."""
    half = n // 2
    t = np.linspace(0.0, np.pi, half)
    upper = np.stack([np.cos(t), np.sin(t)], axis=1)
    lower = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    x = np.concatenate([upper, lower])
    if noise > 0:
        x = x + noise * rng.standard_normal(x.shape)
    y = np.concatenate([np.zeros(half, dtype=np.intp), np.ones(half, dtype=np.intp)])
    return x, y


def gen_two_moons(n: int = 1000, noise: float = 0.1, seed: int = 0,
                  test_fraction: float = 0.2) -> Dataset:
    if n < 2 or n % 2:
        raise ValueError("n must be a positive even number")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    rng = np.random.default_rng([seed, 0])
    x, y = moons_raw(n, noise, rng)
    lo, hi = x.min(axis=0), x.max(axis=0)
    x = (x - lo) / np.where(hi > lo, hi - lo, 1.0)
    x = np.clip(x, 0.0, 1.0)
    order = rng.permutation(n)
    x, y = x[order], y[order]
    is_test = np.zeros(n, dtype=bool)
    is_test[n - int(round(test_fraction * n)):] = True
    return Dataset(x, y, 2, is_test)


def _read(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    return gzip.decompress(raw) if path.suffix == ".gz" else raw


def _header(blob: bytes, magic: int, ndims: int, path) -> tuple[int, ...]:
    need = 4 * (1 + ndims)
    if len(blob) < need:
        raise IdxTruncatedError(f"{path}: header needs {need} bytes, file has {len(blob)}")
    got = struct.unpack_from(">I", blob, 0)[0]
    if got != magic:
        raise IdxMagicError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    return struct.unpack_from(f">{ndims}I", blob, 4)


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Read an IDX image/label pair; pixels are scaled to [0, 1] by /255."""
    img = _read(images_path)
    lab = _read(labels_path)
    n, rows, cols = _header(img, IDX_IMAGES_MAGIC, 3, images_path)
    (n_labels,) = _header(lab, IDX_LABELS_MAGIC, 1, labels_path)
    if len(img) < 16 + n * rows * cols:
        raise IdxTruncatedError(f"{images_path}: expected {n * rows * cols} pixel bytes")
    if len(lab) < 8 + n_labels:
        raise IdxTruncatedError(f"{labels_path}: expected {n_labels} label bytes")
    if n != n_labels:
        raise IdxCountMismatchError(f"{n} images vs {n_labels} labels")
    pixels = np.frombuffer(img, dtype=np.uint8, count=n * rows * cols, offset=16)
    labels = np.frombuffer(lab, dtype=np.uint8, count=n, offset=8)
    num_classes = max(num_classes, int(labels.max()) + 1 if n else 1)
    return Dataset(pixels.reshape(n, rows * cols) / 255.0, labels.astype(np.intp), num_classes)


def write_idx(images: np.ndarray, labels, images_path, labels_path) -> None:
    """Write uint8 images of shape (n, rows, cols) and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())
