"""Datasets: the built-in synthetic blob images and PNG directory ingestion.

The blob dataset renders 1-3 colored Gaussian blobs over a linear gradient
background, entirely procedurally: every image is a pure function of
(seed, index), so random access, re-runs, and concurrent readers all see
identical pixels.  Ground-truth blob masks back the residual-localization
measurements.  Pixel values are float32 in [-1, 1], NCHW.
"""

from __future__ import annotations

import warnings
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError

__all__ = ["BlobDataset", "ArrayDataset", "ingest_directory",
           "to_uint8", "from_uint8", "save_image_png", "load_image_png"]


class _Dataset:
    """Minimal random-access dataset with epoch-shuffled batch iteration."""

    def __len__(self) -> int:
        raise NotImplementedError

    def image(self, index: int) -> np.ndarray:
        raise NotImplementedError

    def batch(self, indices) -> np.ndarray:
        return np.stack([self.image(int(i)) for i in indices])

    def batches(self, batch_size: int, rng: np.random.Generator):
        """Infinite iterator of full batches; reshuffles every epoch and
        wraps partial epochs into the next one."""
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        pending: list[int] = []
        while True:
            pending.extend(rng.permutation(len(self)).tolist())
            while len(pending) >= batch_size:
                take, pending = pending[:batch_size], pending[batch_size:]
                yield self.batch(take)


class BlobDataset(_Dataset):
    """Colored Gaussian blobs on gradient backgrounds."""

    def __init__(self, n_images: int = 2000, image_size: int = 32,
                 channels: int = 3, seed: int = 0):
        if n_images < 1:
            raise ValueError("n_images must be >= 1")
        self.n_images = n_images
        self.image_size = image_size
        self.channels = channels
        self.seed = seed
        g = np.mgrid[0:image_size, 0:image_size].astype(np.float32)
        self._yy = g[0] / (image_size - 1)
        self._xx = g[1] / (image_size - 1)
        self._cache: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return self.n_images

    def _render(self, index: int) -> tuple:
        if not 0 <= index < self.n_images:
            raise IndexError(f"index {index} out of range [0, {self.n_images})")
        rng = np.random.default_rng([self.seed, index])
        c = self.channels
        # gradient background between two colors along a random direction
        theta = rng.uniform(0.0, 2 * np.pi)
        proj = self._xx * np.cos(theta) + self._yy * np.sin(theta)
        t = (proj - proj.min()) / max(proj.max() - proj.min(), 1e-6)
        col0 = rng.uniform(-1.0, 1.0, size=c).astype(np.float32)
        col1 = rng.uniform(-1.0, 1.0, size=c).astype(np.float32)
        img = col0[:, None, None] + t[None] * (col1 - col0)[:, None, None]
        mask = np.zeros((self.image_size, self.image_size), dtype=bool)
        for _ in range(int(rng.integers(1, 4))):
            cy, cx = rng.uniform(0.2, 0.8, size=2)
            radius = rng.uniform(0.10, 0.28)
            color = rng.uniform(-1.0, 1.0, size=c).astype(np.float32)
            r2 = (self._xx - cx) ** 2 + (self._yy - cy) ** 2
            weight = np.exp(-0.5 * r2 / radius ** 2).astype(np.float32)
            img = img * (1.0 - weight[None]) + color[:, None, None] * weight[None]
            mask |= weight > 0.5
        return np.clip(img, -1.0, 1.0).astype(np.float32), mask

    def image(self, index: int) -> np.ndarray:
        img = self._cache.get(index)
        if img is None:
            img = self._render(index)[0]
            self._cache[index] = img
        return img

    def mask(self, index: int) -> np.ndarray:
        """Boolean foreground (blob) mask for the residual studies."""
        return self._render(index)[1]


class ArrayDataset(_Dataset):
    """In-memory dataset over a pre-built NCHW array."""

    def __init__(self, images: np.ndarray):
        if images.ndim != 4:
            raise ValueError(f"expected NCHW images, got shape {images.shape}")
        self.images = np.asarray(images, dtype=np.float32)

    def __len__(self) -> int:
        return self.images.shape[0]

    def image(self, index: int) -> np.ndarray:
        return self.images[index]

    def batch(self, indices) -> np.ndarray:
        return self.images[np.asarray(indices, dtype=np.int64)]


def to_uint8(img: np.ndarray) -> np.ndarray:
    """(C,H,W) float in [-1,1] -> (H,W,C) uint8."""
    arr = np.clip((np.asarray(img) + 1.0) * 127.5, 0.0, 255.0)
    return np.round(arr).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    """(H,W,C) uint8 -> (C,H,W) float32 in [-1,1]."""
    return (arr.astype(np.float32) / 127.5 - 1.0).transpose(2, 0, 1)


def save_image_png(path, img: np.ndarray) -> None:
    arr = to_uint8(img)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path, format="PNG")


def load_image_png(path, image_size: int | None = None,
                   channels: int = 3) -> np.ndarray:
    """Decode a PNG to (C,H,W) float32 in [-1,1], optionally center-cropped
    square and resized."""
    with Image.open(path) as im:
        im = im.convert("RGB" if channels == 3 else "L")
        if image_size is not None:
            side = min(im.size)
            left = (im.width - side) // 2
            top = (im.height - side) // 2
            im = im.crop((left, top, left + side, top + side))
            im = im.resize((image_size, image_size), Image.BILINEAR)
        arr = np.asarray(im)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return from_uint8(arr)


def ingest_directory(path, image_size: int, channels: int = 3) -> ArrayDataset:
    """Load every PNG under ``path`` (sorted by filename), center-cropped
    square, resized, and normalized to [-1, 1].

    Unreadable files are skipped with a warning; an empty result is an
    error."""
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"not a directory: {root}")
    images = []
    for file in sorted(root.iterdir()):
        if file.suffix.lower() != ".png" or not file.is_file():
            continue
        try:
            images.append(load_image_png(file, image_size, channels))
        except (OSError, UnidentifiedImageError) as exc:
            warnings.warn(f"skipping unreadable image {file}: {exc}")
    if not images:
        raise DataError(f"no readable PNG images in {root}")
    return ArrayDataset(np.stack(images))
