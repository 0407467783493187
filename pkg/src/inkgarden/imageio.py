"""PNG I/O and the [-1, 1] float image convention.

Images are (3, H, W) float arrays; 8-bit 0 maps to -1.0 and 255 to +1.0
linearly.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from .errors import InvalidImageError


def from_u8(u8):
    """(H, W, 3) uint8 -> (3, H, W) float32 in [-1, 1]."""
    arr = np.asarray(u8, dtype=np.float32) / 127.5 - 1.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def to_u8(img):
    """(3, H, W) floats in [-1, 1] -> (H, W, 3) uint8 (values clamped first)."""
    clipped = np.clip(np.asarray(img, dtype=np.float64), -1.0, 1.0)
    u8 = np.round((clipped + 1.0) * 127.5).astype(np.uint8)
    return np.ascontiguousarray(u8.transpose(1, 2, 0))


def load_image(path):
    with Image.open(path) as im:
        rgb = im.convert("RGB")
        u8 = np.asarray(rgb, dtype=np.uint8)
    if u8.ndim != 3 or u8.shape[2] != 3:
        raise InvalidImageError(f"expected an RGB image at {path}")
    return from_u8(u8)


def save_image(img, path):
    Image.fromarray(to_u8(img), mode="RGB").save(path, format="PNG")


def image_size(path):
    with Image.open(path) as im:
        return im.size  # (width, height)
