"""Image arrays and PNG I/O.

Images are float64 arrays of shape (H, W, C) with values in [0, 1].
Masks are boolean (H, W) arrays.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import InvalidArgument


def check_image(x, name="image") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or min(x.shape) < 1:
        raise InvalidArgument(f"{name} must be an H x W x C array, got shape {x.shape}")
    if not np.all(np.isfinite(x)) or x.min() < 0.0 or x.max() > 1.0:
        raise InvalidArgument(f"{name} pixel values must lie in [0, 1]")
    return x


def quantize(x: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so in-memory images equal their PNG round trip."""
    return np.round(np.clip(x, 0.0, 1.0) * 255.0) / 255.0


def read_png(path) -> np.ndarray:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_png(x: np.ndarray, path) -> None:
    x = check_image(x)
    arr = np.round(x * 255.0).astype(np.uint8)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    PILImage.fromarray(arr).save(path, format="PNG")


def read_mask(path, shape=None) -> np.ndarray:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("L"))
    bits = arr != 0
    if shape is not None and bits.shape != tuple(shape[:2]):
        raise InvalidArgument(f"mask {os.fspath(path)} has shape {bits.shape}, image is {tuple(shape[:2])}")
    return bits


def write_mask(bits: np.ndarray, path) -> None:
    bits = np.asarray(bits, dtype=bool)
    PILImage.fromarray(bits.astype(np.uint8) * 255).save(path, format="PNG")


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
