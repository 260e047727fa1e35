"""Dataset ingestion: CIFAR-10 binary records and procedurally generated blob images."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

RECORD_BYTES = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)
CIFAR_FILES = {"train": [f"data_batch_{i}.bin" for i in range(1, 6)], "test": ["test_batch.bin"]}
SPLITS = ("train", "test")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetHandle:
    """Where images come from.

    ``source`` is ``cifar10_binary`` (``path`` is a directory with the usual
    batch files, or a single ``.bin`` file) or ``synthetic_blobs``.
    """

    source: str = "synthetic_blobs"
    split: str = "train"
    path: Optional[str] = None
    classes: int = 10
    dim: int = 32
    n: int = 1000
    seed: int = 0
    noise: float = 0.35
    max_shift: int = 4
    blobs: int = 3
    limit: Optional[int] = None

    def __post_init__(self):
        if self.source not in ("cifar10_binary", "synthetic_blobs"):
            raise DatasetError(f"unknown dataset source {self.source!r}")
        if self.split not in SPLITS:
            raise DatasetError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.source == "cifar10_binary" and not self.path:
            raise DatasetError("cifar10_binary needs a path")
        if self.source == "synthetic_blobs" and (self.classes < 2 or self.dim < 4 or self.n < 1):
            raise DatasetError("synthetic_blobs needs classes >= 2, dim >= 4, n >= 1")

    def with_split(self, split: str) -> "DatasetHandle":
        return DatasetHandle(**{**asdict(self), "split": split})

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "DatasetHandle":
        return cls(**doc)


@dataclass
class ImageDataset:
    """Standardized float32 images (N, C, H, W) with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    classes: int
    mean: tuple
    std: tuple
    name: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DatasetError("image and label counts differ")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise DatasetError(f"labels must lie in [0, {self.classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[tuple[np.ndarray, int]]:
        for i in range(len(self)):
            yield self.images[i], int(self.labels[i])

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def epoch_order(self, seed: int, epoch: int) -> np.ndarray:
        return np.random.default_rng([seed, epoch]).permutation(len(self))

    def batches(self, batch_size: int, seed: Optional[int] = None, epoch: int = 0,
                drop_last: bool = False):
        """Yield (images, labels); shuffled deterministically when ``seed`` is given."""
        order = np.arange(len(self)) if seed is None else self.epoch_order(seed, epoch)
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            if drop_last and len(idx) < batch_size:
                break
            yield self.images[idx], self.labels[idx]


def _standardize(pixels: np.ndarray, mean, std) -> np.ndarray:
    m = np.asarray(mean, np.float32).reshape(1, -1, 1, 1)
    s = np.asarray(std, np.float32).reshape(1, -1, 1, 1)
    return ((pixels - m) / s).astype(np.float32)


def read_cifar_records(path: str | os.PathLike, limit: Optional[int] = None):
    """Parse one binary file of 3073-byte records into uint8 images and labels."""
    raw = Path(path).read_bytes()
    if len(raw) % RECORD_BYTES:
        offset = (len(raw) // RECORD_BYTES) * RECORD_BYTES
        raise DatasetError(f"{path}: truncated record at byte offset {offset} "
                           f"({len(raw) - offset} of {RECORD_BYTES} bytes present)")
    count = len(raw) // RECORD_BYTES
    if limit is not None:
        count = min(count, limit)
    rec = np.frombuffer(raw, np.uint8, count * RECORD_BYTES).reshape(count, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    images = rec[:, 1:].reshape(count, *CIFAR_SHAPE)
    return images, labels


def _cifar_files(handle: DatasetHandle) -> list[Path]:
    p = Path(handle.path)
    if p.is_file():
        return [p]
    if not p.is_dir():
        raise DatasetError(f"dataset path {p} does not exist")
    files = [p / f for f in CIFAR_FILES[handle.split]]
    missing = [str(f) for f in files if not f.exists()]
    if missing:
        raise DatasetError(f"missing CIFAR-10 files: {missing}")
    return files


def load_cifar10(handle: DatasetHandle) -> ImageDataset:
    images, labels = [], []
    remaining = handle.limit
    for f in _cifar_files(handle):
        if remaining is not None and remaining <= 0:
            break
        x, y = read_cifar_records(f, remaining)
        images.append(x)
        labels.append(y)
        if remaining is not None:
            remaining -= len(y)
    x = np.concatenate(images).astype(np.float32) / 255.0
    y = np.concatenate(labels)
    if y.size and y.max() >= 10:
        raise DatasetError(f"label {int(y.max())} out of range for CIFAR-10")
    return ImageDataset(_standardize(x, CIFAR_MEAN, CIFAR_STD), y, 10, CIFAR_MEAN, CIFAR_STD,
                        name=f"cifar10/{handle.split}")


def blob_prototypes(classes: int, dim: int, blobs: int, seed: int) -> np.ndarray:
    """One RGB template per class: a sum of coloured Gaussian blobs, values in [0, 1]."""
    rng = np.random.default_rng([seed, 0xB10B])
    yy, xx = np.mgrid[0:dim, 0:dim].astype(np.float64)
    protos = np.zeros((classes, 3, dim, dim))
    for k in range(classes):
        for _ in range(blobs):
            cy, cx = rng.uniform(0, dim, 2)
            radius = rng.uniform(0.08, 0.22) * dim
            colour = rng.uniform(-1.0, 1.0, 3)
            dy = np.minimum(np.abs(yy - cy), dim - np.abs(yy - cy))
            dx = np.minimum(np.abs(xx - cx), dim - np.abs(xx - cx))
            bump = np.exp(-(dy ** 2 + dx ** 2) / (2 * radius ** 2))
            protos[k] += colour[:, None, None] * bump
    return np.clip(0.5 + 0.5 * protos, 0.0, 1.0)


def load_blobs(handle: DatasetHandle) -> ImageDataset:
    """Class templates, randomly rolled (wrap-around), contrast-jittered and noised.

    Templates depend only on (seed, classes, dim, blobs); the train and test
    splits draw disjoint sample streams.  Standardization constants come from
    the templates so both splits share them.
    """
    protos = blob_prototypes(handle.classes, handle.dim, handle.blobs, handle.seed)
    rng = np.random.default_rng([handle.seed, SPLITS.index(handle.split) + 1])
    labels = rng.integers(0, handle.classes, handle.n)
    shifts = rng.integers(-handle.max_shift, handle.max_shift + 1, (handle.n, 2))
    contrast = rng.uniform(0.7, 1.3, handle.n)
    noise = rng.standard_normal((handle.n, 3, handle.dim, handle.dim)) * handle.noise
    images = np.empty((handle.n, 3, handle.dim, handle.dim))
    for i in range(handle.n):
        p = np.roll(protos[labels[i]], tuple(shifts[i]), axis=(1, 2))
        images[i] = 0.5 + contrast[i] * (p - 0.5)
    images = np.clip(images + noise, 0.0, 1.0)
    mean = tuple(float(v) for v in protos.mean(axis=(0, 2, 3)))
    std = tuple(float(v) for v in np.sqrt(protos.var(axis=(0, 2, 3)) + handle.noise ** 2))
    return ImageDataset(_standardize(images.astype(np.float32), mean, std), labels.astype(np.int64),
                        handle.classes, mean, std, name=f"blobs/{handle.split}")


def load_dataset(handle: DatasetHandle) -> ImageDataset:
    if handle.source == "cifar10_binary":
        return load_cifar10(handle)
    return load_blobs(handle)
