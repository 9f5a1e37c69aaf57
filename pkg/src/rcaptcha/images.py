"""Image container conventions and PNG round-tripping.

Images are numpy float32 arrays with values in [0, 1]: shape (H, W) for
grayscale, (H, W, 3) for RGB. On disk everything is 8-bit PNG, so a
save/load round trip quantizes to the 1/255 grid.
"""

from __future__ import annotations

import os

import numpy as np
from PIL import Image


def to_float(arr: np.ndarray) -> np.ndarray:
    """8-bit array -> float32 in [0, 1]."""
    return np.asarray(arr, dtype=np.float32) / 255.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.round(img * 255.0).astype(np.uint8)


def save_png(image: np.ndarray, path: str | os.PathLike) -> None:
    arr = to_uint8(image)
    mode = "L" if arr.ndim == 2 else "RGB"
    Image.fromarray(arr, mode=mode).save(path, format="PNG")


def load_png(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode == "L":
            return to_float(np.asarray(im))
        return to_float(np.asarray(im.convert("RGB")))


def assert_unit_range(image: np.ndarray, name: str = "image") -> None:
    if image.size and (image.min() < 0.0 or image.max() > 1.0):
        raise ValueError(f"{name} values must lie in [0, 1]")
