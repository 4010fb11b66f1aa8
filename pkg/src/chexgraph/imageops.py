"""Deterministic image primitives: resizing, channel handling, PNG I/O.

Resizing is implemented here (half-pixel-center bilinear, edge clamped)
rather than delegated to an image library so the same affine mapping is
applied to pixels, box coordinates, and feature maps, and so outputs are
bit-stable across library versions.
"""

from __future__ import annotations

import numpy as np
from PIL import Image


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample over the last two axes, half-pixel centers.

    A resize to the input's own size is the identity; constant inputs stay
    constant for any target size.
    """
    h, w = img.shape[-2:]
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(img.dtype if img.dtype.kind == "f" else np.float64)
    wx = (xs - x0).astype(wy.dtype)
    wy = wy[:, None]
    wx = wx[None, :]
    src = img.astype(wy.dtype, copy=False)
    top = src[..., y0[:, None], x0[None, :]] * (1 - wx) + src[..., y0[:, None], x1[None, :]] * wx
    bot = src[..., y1[:, None], x0[None, :]] * (1 - wx) + src[..., y1[:, None], x1[None, :]] * wx
    return top * (1 - wy) + bot * wy


def to_chw(img: np.ndarray) -> np.ndarray:
    """Canonicalize a grayscale/HWC/CHW image to float [3, H, W] in [0, 1]."""
    arr = np.asarray(img)
    if arr.dtype.kind in "ui":
        arr = arr.astype(np.float64) / 255.0
    else:
        arr = arr.astype(np.float64, copy=False)
    if arr.ndim == 2:
        arr = np.stack([arr, arr, arr])
    elif arr.ndim == 3 and arr.shape[-1] in (3, 4) and arr.shape[0] not in (3, 4):
        arr = arr[..., :3].transpose(2, 0, 1)
    elif arr.ndim == 3 and arr.shape[0] in (3, 4):
        arr = arr[:3]
    else:
        raise ValueError(f"unsupported image shape {arr.shape}")
    return np.clip(arr, 0.0, 1.0)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im)


def write_png(path, arr: np.ndarray) -> None:
    """Write a uint8 array (HW grayscale or HWC color) as PNG."""
    if arr.dtype != np.uint8:
        raise ValueError("write_png expects uint8 data")
    Image.fromarray(arr).save(path, format="PNG")
