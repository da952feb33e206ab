"""Datasets: seeded synthetic Gaussian-blob images and CIFAR-10 binary batches."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

SPLITS = ("train", "validation", "test")
CIFAR_RECORD = 3073
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    x: np.ndarray          # [N, C, H, W] in [0, 1]
    y: np.ndarray          # [N] int64
    split: np.ndarray      # [N] split tag per item

    def __post_init__(self):
        if not (len(self.x) == len(self.y) == len(self.split)):
            raise ValueError("x, y and split must have equal length")

    def part(self, name: str) -> Tuple[np.ndarray, np.ndarray]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        m = self.split == name
        return self.x[m], self.y[m]

    @property
    def train(self):
        return self.part("train")

    @property
    def validation(self):
        return self.part("validation")

    @property
    def test(self):
        return self.part("test")

    @property
    def num_classes(self) -> int:
        return int(self.y.max()) + 1

    @property
    def image_shape(self) -> tuple:
        return tuple(self.x.shape[1:])


def _tag(n: int, name: str) -> np.ndarray:
    return np.array([name] * n, dtype="<U10")


def carve_validation(ds: Dataset, size: int, seed: int) -> Dataset:
    """Move ``size`` randomly chosen training items into the validation split."""
    train_idx = np.flatnonzero(ds.split == "train")
    if not 0 < size < len(train_idx):
        raise ValueError(f"validation size {size} must be in (0, {len(train_idx)})")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7A11D]))
    pick = np.sort(rng.choice(train_idx, size=size, replace=False))
    split = ds.split.copy()
    split[pick] = "validation"
    return Dataset(ds.x, ds.y, split)


def gen_synthetic(classes: int = 2, per_class: int = 200, size: int = 16, seed: int = 0,
                  margin: float = 0.2, noise: float = 0.1, channels: int = 3,
                  test_per_class: Optional[int] = None, blob_grid: int = 4) -> Dataset:
    """Class-conditional Gaussian images around smooth random prototypes.

    Each class gets a prototype pattern with unit RMS, built from a
    ``blob_grid`` x ``blob_grid`` Gaussian field upsampled to ``size``.  A sample
    is ``clip(0.5 + margin * prototype + noise * N(0, 1), 0, 1)``; margin 0
    makes every class identically distributed.
    """
    if size < 16:
        raise ValueError(f"synthetic images must be at least 16x16, got {size}")
    if classes < 2 or per_class < 1:
        raise ValueError("need >= 2 classes and >= 1 image per class")
    if size % blob_grid:
        raise ValueError("size must be a multiple of blob_grid")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5A17]))
    rep = size // blob_grid
    protos = rng.standard_normal((classes, channels, blob_grid, blob_grid))
    protos = np.kron(protos, np.ones((rep, rep)))
    protos /= np.sqrt((protos ** 2).mean(axis=(1, 2, 3), keepdims=True))

    n_test = per_class if test_per_class is None else test_per_class

    def draw(n_per):
        y = np.repeat(np.arange(classes), n_per)
        x = 0.5 + margin * protos[y] + noise * rng.standard_normal((len(y), channels, size, size))
        return np.clip(x, 0.0, 1.0), y

    xtr, ytr = draw(per_class)
    xte, yte = draw(n_test)
    return Dataset(np.concatenate([xtr, xte]), np.concatenate([ytr, yte]).astype(np.int64),
                   np.concatenate([_tag(len(ytr), "train"), _tag(len(yte), "test")]))


def read_cifar_file(path) -> Tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        offset = (raw.size // CIFAR_RECORD) * CIFAR_RECORD
        raise DataFormatError(f"{path}: truncated record at byte offset {offset} "
                              f"({raw.size - offset} of {CIFAR_RECORD} bytes)")
    rec = raw.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.flatnonzero(labels > 9)[0])
        raise DataFormatError(f"{path}: label {labels[bad]} out of range at byte offset {bad * CIFAR_RECORD}")
    images = rec[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def _balanced_subset(y: np.ndarray, per_class: Optional[int], rng) -> np.ndarray:
    if per_class is None:
        return np.arange(len(y))
    keep = []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        if len(idx) < per_class:
            raise ValueError(f"class {c} has only {len(idx)} images, {per_class} requested")
        keep.append(rng.choice(idx, size=per_class, replace=False))
    return np.sort(np.concatenate(keep))


def ingest_cifar10(directory, subset_per_class: Optional[int] = None, seed: int = 0,
                   test_per_class: Optional[int] = None) -> Dataset:
    """Load the standard CIFAR-10 binary batches, pixel values scaled by 1/255."""
    directory = Path(directory)
    parts = []
    for name in CIFAR_TRAIN_FILES + (CIFAR_TEST_FILE,):
        p = directory / name
        if not p.exists():
            raise FileNotFoundError(f"missing CIFAR-10 file {p}")
        parts.append(read_cifar_file(p))
    xtr = np.concatenate([p[0] for p in parts[:-1]])
    ytr = np.concatenate([p[1] for p in parts[:-1]])
    xte, yte = parts[-1]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC1FA]))
    itr = _balanced_subset(ytr, subset_per_class, rng)
    ite = _balanced_subset(yte, test_per_class, rng)
    x = np.concatenate([xtr[itr], xte[ite]]).astype(np.float64) / 255.0
    y = np.concatenate([ytr[itr], yte[ite]])
    split = np.concatenate([_tag(len(itr), "train"), _tag(len(ite), "test")])
    return Dataset(x, y, split)
