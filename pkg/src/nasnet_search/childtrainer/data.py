"""Procedural grating images: a small, deterministic stand-in for CIFAR-10."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SyntheticDataset:
    num_classes: int = 10
    image_size: int = 16
    channels: int = 3
    n_train: int = 2000
    n_val: int = 500
    seed: int = 0
    noise: float = 0.6
    phase_jitter: float = np.pi / 2

    def __post_init__(self) -> None:
        if self.num_classes < 2 or self.image_size < 4 or self.channels < 1:
            raise ValueError(f"invalid dataset geometry: {self}")
        if self.n_train < self.num_classes or self.n_val < 1:
            raise ValueError("need at least one training image per class and one validation image")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")


@dataclass(frozen=True)
class Dataset:
    spec: SyntheticDataset
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    train_index: np.ndarray
    val_index: np.ndarray

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.train_x.shape[1:]


def class_generators(spec: SyntheticDataset) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class (angle, spatial frequency in cycles per image, RGB tint)."""
    rng = np.random.default_rng([spec.seed, 7919])
    n_angles = (spec.num_classes + 1) // 2
    k = np.arange(spec.num_classes)
    angles = (k % n_angles) * np.pi / n_angles
    freqs = np.where(k < n_angles, 2.0, 4.0)
    tints = 0.6 + 0.8 * rng.random((spec.num_classes, spec.channels))
    return angles, freqs, tints


def render(spec: SyntheticDataset, labels: np.ndarray, phases: np.ndarray, amplitudes: np.ndarray) -> np.ndarray:
    """Noise-free images for the given labels, phases and contrasts."""
    angles, freqs, tints = class_generators(spec)
    coords = np.arange(spec.image_size) / spec.image_size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    a, f = angles[labels], freqs[labels]
    proj = xx[None] * np.cos(a)[:, None, None] + yy[None] * np.sin(a)[:, None, None]
    wave = np.cos(2 * np.pi * f[:, None, None] * proj + phases[:, None, None]) * amplitudes[:, None, None]
    return wave[..., None] * tints[labels][:, None, None, :]


def generate_dataset(spec: SyntheticDataset) -> Dataset:
    """Class-balanced gratings plus pixel noise; the first ``n_train`` indices are training data."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n_train + spec.n_val
    labels = rng.permutation(np.arange(n) % spec.num_classes)
    phases = rng.uniform(-spec.phase_jitter, spec.phase_jitter, size=n)
    amplitudes = rng.uniform(0.8, 1.2, size=n)
    images = render(spec, labels, phases, amplitudes)
    images = images + spec.noise * rng.standard_normal(images.shape)
    images = images.astype(np.float32)
    labels = labels.astype(np.int64)
    index = np.arange(n)
    parts = []
    for arr in (images[: spec.n_train], labels[: spec.n_train], images[spec.n_train :], labels[spec.n_train :],
                index[: spec.n_train], index[spec.n_train :]):
        arr = arr.copy()
        arr.setflags(write=False)
        parts.append(arr)
    return Dataset(spec, *parts)


def load_cifar10(path) -> Dataset:
    """Hook for the real CIFAR-10 python batches (not used in tests)."""
    import pickle
    from pathlib import Path

    root = Path(path)
    xs, ys = [], []
    for name in [f"data_batch_{i}" for i in range(1, 6)]:
        with open(root / name, "rb") as fh:
            batch = pickle.load(fh, encoding="bytes")
        xs.append(batch[b"data"].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
        ys.append(np.asarray(batch[b"labels"]))
    x = (np.concatenate(xs).astype(np.float32) / 255.0 - 0.5) / 0.25
    y = np.concatenate(ys).astype(np.int64)
    # the last 5,000 training images form the controller's validation split
    spec = SyntheticDataset(image_size=32, n_train=len(y) - 5000, n_val=5000)
    index = np.arange(len(y))
    return Dataset(spec, x[:-5000], y[:-5000], x[-5000:], y[-5000:], index[:-5000], index[-5000:])
