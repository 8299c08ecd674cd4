"""Image I/O, a bundled synthetic texture generator, and patch sampling."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = (".png", ".ppm", ".pgm", ".pnm", ".bmp", ".jpg", ".jpeg", ".tif", ".tiff")


def load_image(path: str | Path) -> np.ndarray:
    """8-bit RGB file -> float64 array ``(3, H, W)`` in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr.transpose(2, 0, 1) / 255.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(path: str | Path, image: np.ndarray) -> None:
    """Write ``(3, H, W)`` or ``(H, W)`` values in [0, 1] as 8-bit PNG/PPM (by suffix)."""
    arr = to_uint8(image)
    if arr.ndim == 3:
        arr = arr.transpose(1, 2, 0)
        if arr.shape[2] == 1:
            arr = arr[:, :, 0]
    Image.fromarray(arr).save(path)


def synthetic_texture(rng: np.random.Generator, height: int, width: int, channels: int = 3) -> np.ndarray:
    """One ``(C, H, W)`` image in [0, 1]: oriented gratings over flat shapes.

    Gratings give texture at several frequencies, rectangles and disks give
    edges and flat regions, and a little noise keeps it natural-looking.
    """
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    scale = float(max(height, width))
    img = np.empty((channels, height, width))
    img[:] = rng.uniform(0.2, 0.8, size=(channels, 1, 1))
    for _ in range(int(rng.integers(1, 4))):
        top, left = rng.integers(0, height), rng.integers(0, width)
        color = rng.uniform(0.0, 1.0, size=(channels, 1, 1))
        if rng.random() < 0.5:
            h, w = rng.integers(height // 4, height + 1), rng.integers(width // 4, width + 1)
            mask = (yy >= top) & (yy < top + h) & (xx >= left) & (xx < left + w)
        else:
            r = rng.uniform(0.15, 0.5) * scale
            mask = (yy - top) ** 2 + (xx - left) ** 2 < r * r
        img = np.where(mask[None], color, img)
    for _ in range(int(rng.integers(1, 4))):
        freq = rng.uniform(1.0, 6.0) / scale
        theta = rng.uniform(0.0, np.pi)
        phase = rng.uniform(0.0, 2 * np.pi)
        amp = rng.uniform(0.03, 0.15, size=(channels, 1, 1))
        img += amp * np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)[None]
    img += rng.normal(0.0, 0.01, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def synthetic_dataset(count: int, height: int, width: int | None = None, seed: int = 0) -> np.ndarray:
    """``(count, 3, H, W)`` float32 images; image i depends only on ``(seed, i)``."""
    width = height if width is None else width
    out = np.empty((count, 3, height, width), dtype=np.float32)
    for i in range(count):
        out[i] = synthetic_texture(np.random.default_rng([seed, i]), height, width)
    return out


def list_images(directory: str | Path) -> list[Path]:
    paths = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise FileNotFoundError(f"no images found in {directory}")
    return paths


def load_directory(directory: str | Path) -> list[np.ndarray]:
    return [load_image(p) for p in list_images(directory)]


def random_crops(images: Sequence[np.ndarray], patch: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` random ``patch x patch`` crops, each from a uniformly chosen image."""
    out = np.empty((count, images[0].shape[0], patch, patch), dtype=np.float32)
    for k in range(count):
        img = images[int(rng.integers(len(images)))]
        _, h, w = img.shape
        if h < patch or w < patch:
            raise ValueError(f"image of size {h}x{w} is smaller than the {patch}px patch")
        i, j = int(rng.integers(h - patch + 1)), int(rng.integers(w - patch + 1))
        out[k] = img[:, i:i + patch, j:j + patch]
    return out
