"""Datasets: CIFAR-10 binary batches when available, else a seeded synthetic set.

The synthetic set has ten classes of 32x32 RGB textures (horizontal,
vertical and diagonal stripes, checker, dots, grid, rings, coarse speckle,
smooth blobs, flat).  Every class is closed under horizontal flips, so flip
augmentation never changes the label.  Each image draws a random period and
phase, a random background color with a foreground color at a random
contrast, a mild linear shading, and additive Gaussian pixel noise.  Classes are balanced (labels cycle 0..9 before shuffling).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .image import load_cifar10_arrays

NUM_CLASSES = 10
CLASS_NAMES = (
    "hstripes",
    "vstripes",
    "diagonal",
    "speckle",
    "checker",
    "dots",
    "grid",
    "rings",
    "blobs",
    "flat",
)

CONTRAST = (0.25, 0.5)
PERIOD = (5.0, 8.0)
NOISE = 0.02


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, C)
    labels: np.ndarray  # (N,)

    def __len__(self):
        return len(self.labels)

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n])


def _pattern(kind: int, rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    period = rng.uniform(*PERIOD)
    phase = rng.uniform(0.0, 2 * np.pi)
    freq = 2 * np.pi / period
    name = CLASS_NAMES[kind]
    if name == "hstripes":
        return np.sin(freq * yy + phase) > 0
    if name == "vstripes":
        return np.sin(freq * xx + phase) > 0
    if name == "diagonal":
        slope = rng.choice([-1.0, 1.0])
        return np.sin(freq * (xx + slope * yy) / np.sqrt(2) + phase) > 0
    if name == "speckle":
        cell = int(rng.integers(2, 4))
        coarse = rng.uniform(size=(size // cell + 1, size // cell + 1)) > 0.5
        return np.kron(coarse, np.ones((cell, cell), dtype=bool))[:size, :size]
    if name == "checker":
        return np.sin(freq * yy + phase) * np.sin(freq * xx + phase / 2) > 0
    if name == "dots":
        step = int(round(period))
        oy, ox = rng.integers(0, step, size=2)
        return (((yy + oy) % step) < 2) & (((xx + ox) % step) < 2)
    if name == "grid":
        step = int(round(period))
        oy, ox = rng.integers(0, step, size=2)
        return (((yy + oy) % step) < 1) | (((xx + ox) % step) < 1)
    if name == "rings":
        cy, cx = rng.uniform(0, size, size=2)
        return np.sin(freq * np.hypot(yy - cy, xx - cx) + phase) > 0
    if name == "blobs":
        coarse = rng.standard_normal((5, 5))
        idx = np.linspace(0, 4, size)
        fine = np.array([np.interp(idx, np.arange(5), row) for row in coarse])
        fine = np.array([np.interp(idx, np.arange(5), col) for col in fine.T]).T
        return fine > 0
    return np.zeros((size, size), dtype=bool)


def synth_image(kind: int, rng: np.random.Generator, size: int = 32) -> np.ndarray:
    mask = _pattern(kind, rng, size).astype(np.float64)[:, :, None]
    bg = rng.uniform(0.2, 0.8, size=3)
    direction = rng.standard_normal(3)
    contrast = rng.uniform(*CONTRAST)
    fg = bg + contrast * direction / np.linalg.norm(direction)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1) - 0.5
    gy, gx = rng.uniform(-0.15, 0.15, size=2)
    shade = (gy * yy + gx * xx)[:, :, None]
    img = bg + shade + mask * (fg - bg) + rng.normal(0.0, NOISE, size=(size, size, 3))
    return np.clip(img, 0.0, 1.0)


def synthetic(n: int, seed: int, size: int = 32) -> Dataset:
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % NUM_CLASSES
    rng.shuffle(labels)
    images = np.stack([synth_image(int(k), rng, size) for k in labels]) if n else np.zeros((0, size, size, 3))
    return Dataset(images, labels.astype(np.int64))


def load(
    n_train: int,
    n_test: int,
    seed: int,
    cifar_dir: str | os.PathLike | None = None,
) -> tuple[Dataset, Dataset]:
    """Train/test split.  ``cifar_dir`` holds ``data_batch_*.bin`` and ``test_batch.bin``."""
    if cifar_dir:
        train_parts = []
        for i in range(1, 6):
            path = os.path.join(cifar_dir, f"data_batch_{i}.bin")
            if os.path.exists(path):
                train_parts.append(load_cifar10_arrays(path))
        if not train_parts:
            raise FileNotFoundError(f"no data_batch_*.bin files in {cifar_dir}")
        x = np.concatenate([p[0] for p in train_parts])[:n_train]
        y = np.concatenate([p[1] for p in train_parts])[:n_train]
        tx, ty = load_cifar10_arrays(os.path.join(cifar_dir, "test_batch.bin"), n_test)
        return Dataset(x, y), Dataset(tx, ty)
    return synthetic(n_train, seed), synthetic(n_test, seed + 1_000_003)
