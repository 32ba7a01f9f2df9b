"""Dataset handles, deterministic splits and augmentation hooks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .io import load_idx, read_tensor


@dataclass
class DatasetHandle:
    images: np.ndarray
    labels: np.ndarray
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(f"image count {len(self.images)} != label count {len(self.labels)}")
        _check_ratios(self.split)

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_files(cls, images, labels, split=(0.7, 0.1, 0.2)) -> DatasetHandle:
        """IDX files or a binary tensor of images plus IDX/text labels."""
        images, labels = Path(images), Path(labels)
        x = read_tensor(images).astype(np.float64) if images.suffix == ".cspt" else load_idx(images)
        if labels.suffix in (".txt", ".csv"):
            y = np.loadtxt(labels, dtype=np.int64, ndmin=1)
        else:
            y = load_idx(labels)
        return cls(x, y, split)


def _check_ratios(ratios) -> None:
    if len(ratios) != 3 or min(ratios) < 0 or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")


def split_dataset(handle, ratios=(0.7, 0.1, 0.2), seed=0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shuffled (train, val, test) index arrays; disjoint and covering.

    Sizes are ``round(n * ratio)`` for train and val, the rest is test.
    """
    _check_ratios(ratios)
    n = handle if isinstance(handle, int) else len(handle)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(n * ratios[0]))
    n_val = min(int(round(n * ratios[1])), n - n_train)
    return order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]


def random_rotation(images, rng, max_degrees=25.0, p=0.5) -> np.ndarray:
    """Rotate each image by a uniform angle in [-max, max] with probability
    ``p``; bilinear resampling, zero fill. Images are (N, H, W[, C])."""
    images = np.asarray(images, dtype=np.float64)
    out = images.copy()
    hit = rng.random(len(images)) < p
    angles = rng.uniform(-max_degrees, max_degrees, size=len(images))
    for k in np.nonzero(hit)[0]:
        out[k] = ndimage.rotate(images[k], angles[k], axes=(1, 0), reshape=False, order=1, mode="constant")
    return np.clip(out, images.min(initial=0.0), images.max(initial=1.0))


def random_flips(images, rng, p=0.5) -> np.ndarray:
    """Independent horizontal and vertical flips, each with probability ``p``."""
    out = np.array(images, dtype=np.float64, copy=True)
    h = rng.random(len(out)) < p
    v = rng.random(len(out)) < p
    out[h] = out[h][:, :, ::-1]
    out[v] = out[v][:, ::-1]
    return out


def normalize(images, lo=0.0, hi=1.0) -> np.ndarray:
    """Min-max scale each image into [lo, hi]."""
    x = np.asarray(images, dtype=np.float64)
    axes = tuple(range(1, x.ndim))
    mn = x.min(axis=axes, keepdims=True)
    span = x.max(axis=axes, keepdims=True) - mn
    return lo + (hi - lo) * np.divide(x - mn, span, out=np.zeros_like(x), where=span > 0)


def synthetic_rgb(n, rng, hw=(64, 64), classes=10) -> tuple[np.ndarray, np.ndarray]:
    """Smooth random HWC images in [0, 1] whose mean colour depends on the
    class; a stand-in for satellite tiles."""
    labels = rng.integers(0, classes, size=n)
    palette = np.random.default_rng(1234).random((classes, 3))
    noise = ndimage.gaussian_filter(rng.random((n, *hw, 3)), sigma=(0, 3, 3, 0))
    noise = normalize(noise)
    images = 0.5 * noise + 0.5 * palette[labels][:, None, None, :]
    return np.clip(images, 0.0, 1.0), labels
