"""8-bit PNG image IO.

All in-memory images are float arrays in [0, 1], linear light. The sRGB
transfer is applied only at the file boundary: albedo and shaded images are
stored as sRGB PNGs, normal images use the linear mapping (n+1)/2.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .utils import srgb_decode, srgb_encode


def save_png(path: str | Path, image: np.ndarray, color_space: str = "srgb") -> None:
    """Write an H×W×3 float image in [0,1] as an 8-bit PNG."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got shape {img.shape}")
    if color_space == "srgb":
        img = srgb_encode(np.clip(img, 0.0, 1.0))
    elif color_space != "linear":
        raise ValueError(f"unknown color space {color_space!r}")
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def load_png(path: str | Path, color_space: str = "srgb") -> np.ndarray:
    """Read an 8-bit PNG into an H×W×3 float32 array in [0,1] linear light."""
    with Image.open(path) as im:
        data = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    if color_space == "srgb":
        data = srgb_decode(data)
    elif color_space != "linear":
        raise ValueError(f"unknown color space {color_space!r}")
    return data.astype(np.float32)


def quantize_unit(image: np.ndarray) -> np.ndarray:
    """Round-trip a [0,1] float image through the 8-bit grid (no transfer)."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def encode_normal(normal: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Map world-space normals to the [0,1] image range; background is 0.5 gray."""
    img = (np.asarray(normal, dtype=np.float64) + 1.0) * 0.5
    if mask is not None:
        img = np.where(mask[..., None] > 0.5, img, 0.5)
    return img


def decode_normal(image: np.ndarray) -> np.ndarray:
    return np.asarray(image, dtype=np.float64) * 2.0 - 1.0
