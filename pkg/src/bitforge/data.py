"""Datasets: labelled tensor splits and the bundled synthetic image task."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

SPLITS = ("train", "val", "calib")


@dataclass
class Dataset:
    x: np.ndarray  # N x C x H x W (or N x D)
    y: np.ndarray  # int labels
    n_classes: int = 10

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise ValueError("x and y lengths differ")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise ValueError("label out of range")

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.n_classes)


@dataclass
class DatasetSplits:
    train: Dataset
    val: Dataset
    calib: Dataset

    def search_split(self, holdout=0.2, seed=0):
        """Split ``train`` into (finetune part, held-out reward part)."""
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(self.train))
        n_hold = int(round(holdout * len(order)))
        return self.train.subset(np.sort(order[n_hold:])), self.train.subset(np.sort(order[:n_hold]))

    def save(self, out_dir) -> list:
        """Write ``<split>_x.npy`` / ``<split>_y.npy``; returns written paths."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for name in SPLITS:
            ds = getattr(self, name)
            for suffix, arr in (("x", ds.x.astype(np.float32)), ("y", ds.y.astype(np.int64))):
                p = out_dir / f"{name}_{suffix}.npy"
                np.save(p, arr)
                paths.append(p)
        return paths


def load_splits(data_dir, n_classes=None) -> DatasetSplits:
    """Load any directory holding ``{train,val,calib}_{x,y}.npy``."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {data_dir}")
    arrays = {}
    for name in SPLITS:
        for suffix in ("x", "y"):
            p = data_dir / f"{name}_{suffix}.npy"
            if not p.exists():
                raise FileNotFoundError(f"dataset file missing: {p}")
            arrays[name, suffix] = np.load(p)
    if n_classes is None:
        n_classes = int(max(arrays[s, "y"].max() for s in SPLITS)) + 1
    return DatasetSplits(*(Dataset(arrays[s, "x"], arrays[s, "y"], n_classes) for s in SPLITS))


def _prototypes(rng, n_classes, channels, size):
    """One smooth pattern per class: two gratings plus a colour tint."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    protos = np.empty((n_classes, channels, size, size))
    for c in range(n_classes):
        img = np.zeros((size, size))
        for _ in range(2):
            theta = rng.uniform(0, np.pi)
            freq = rng.uniform(1.5, 4.5)
            phase = rng.uniform(0, 2 * np.pi)
            img += np.cos(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        tint = rng.uniform(0.3, 1.0, size=channels)
        protos[c] = 0.5 + 0.25 * img[None] * tint[:, None, None]
    return protos


def synthetic_splits(seed=0, n_train=1000, n_val=500, n_calib=64, n_classes=10,
                     channels=3, size=32, noise=0.35, max_shift=4) -> DatasetSplits:
    """Deterministic 10-class image task with values in [0, 1].

    Each sample is its class prototype, randomly rolled by up to
    ``max_shift`` pixels, contrast-jittered and covered in Gaussian noise.
    ``train`` and ``val`` hold exactly N/n_classes samples per class;
    ``calib`` cycles through the classes.
    """
    if n_train % n_classes or n_val % n_classes:
        raise ValueError("train/val sizes must be multiples of n_classes")
    rng = np.random.default_rng(seed)
    protos = _prototypes(rng, n_classes, channels, size)

    def draw(n, balanced):
        labels = np.arange(n) % n_classes
        if balanced:
            labels = rng.permutation(labels)
        x = np.empty((n, channels, size, size))
        for i, c in enumerate(labels):
            dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
            img = np.roll(protos[c], (dy, dx), axis=(1, 2))
            img = 0.5 + (img - 0.5) * rng.uniform(0.7, 1.3)
            x[i] = img + noise * rng.standard_normal(img.shape)
        # float32-representable so a save/load round trip is exact
        return Dataset(np.clip(x, 0.0, 1.0).astype(np.float32), labels, n_classes)

    return DatasetSplits(draw(n_train, True), draw(n_val, True), draw(n_calib, False))
