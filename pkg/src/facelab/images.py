"""Image grid helpers.

An image grid is a float64 numpy array of shape (H, W, C) with intensities
in [0, 1]. C is 1 in the default grayscale world. On disk images are 16-bit
grayscale PNGs so save/load round-trips are lossless at test tolerances.
"""

from __future__ import annotations

import os

import cv2
import numpy as np
import torch

PNG_MAX = 65535


def as_image(a: np.ndarray) -> np.ndarray:
    """Coerce an (H, W) or (H, W, C) array to float64 (H, W, C)."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise ValueError(f"expected 2-d or 3-d image array, got shape {a.shape}")
    return a


def clip01(a: np.ndarray) -> np.ndarray:
    return np.clip(a, 0.0, 1.0)


def save_png(path: str, image: np.ndarray) -> None:
    """Write a [0,1] image as a 16-bit PNG (single channel only)."""
    image = as_image(image)
    if image.shape[2] != 1:
        raise ValueError("only single-channel images are stored as PNG")
    q = np.round(clip01(image[:, :, 0]) * PNG_MAX).astype(np.uint16)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    if not cv2.imwrite(path, q):
        raise IOError(f"failed to write {path}")


def load_png(path: str) -> np.ndarray:
    raw = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FileNotFoundError(path)
    if raw.dtype == np.uint8:
        scale = 255.0
    else:
        scale = float(PNG_MAX)
    return as_image(raw.astype(np.float64) / scale)


def to_torch(image: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(H, W, C) numpy -> (1, C, H, W) torch tensor."""
    image = as_image(image)
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))[None]).to(dtype)


def batch_to_torch(images: list[np.ndarray] | np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """List of (H, W, C) -> (N, C, H, W)."""
    stack = np.stack([as_image(im).transpose(2, 0, 1) for im in images])
    return torch.from_numpy(np.ascontiguousarray(stack)).to(dtype)


def bilinear_resize(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a 2-d array, half-pixel-center convention with
    edge clamping."""
    h, w = a.shape
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    return (
        a[np.ix_(y0, x0)] * (1 - wy) * (1 - wx)
        + a[np.ix_(y0, x1)] * (1 - wy) * wx
        + a[np.ix_(y1, x0)] * wy * (1 - wx)
        + a[np.ix_(y1, x1)] * wy * wx
    )


def from_torch(x: torch.Tensor) -> np.ndarray:
    """(C, H, W) or (1, C, H, W) torch tensor -> (H, W, C) float64 numpy."""
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise ValueError("expected a single image")
        x = x[0]
    return x.detach().cpu().numpy().astype(np.float64).transpose(1, 2, 0)
