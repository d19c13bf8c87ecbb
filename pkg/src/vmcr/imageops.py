"""Plain-numpy image helpers shared by mask generation, augmentation and
the synthetic data renderer. All operate on float arrays with trailing
(H, W) axes."""

from __future__ import annotations

import math

import numpy as np


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Normalized 1-d Gaussian, kernel radius ceil(3*sigma)."""
    radius = math.ceil(3 * sigma)
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def _blur_axis(a: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = len(kernel) // 2
    # reflect padding avoids the dark-edge bias of zero padding
    pad = [(0, 0)] * a.ndim
    pad[axis] = (radius, radius)
    ap = np.pad(a, pad, mode="reflect")
    out = np.zeros(a.shape, dtype=ap.dtype)
    n = a.shape[axis]
    for i, kv in enumerate(kernel):
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(i, i + n)
        out += kv * ap[tuple(sl)]
    return out


def gaussian_blur(a: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur over the last two axes."""
    if sigma <= 0:
        return a.copy()
    # reflect padding requires radius < axis length
    radius_cap = min(a.shape[-1], a.shape[-2]) - 1
    kernel = gaussian_kernel1d(sigma)
    if len(kernel) // 2 > radius_cap:
        kernel = gaussian_kernel1d(sigma)[len(kernel) // 2 - radius_cap:
                                          len(kernel) // 2 + radius_cap + 1]
        kernel = kernel / kernel.sum()
    out = _blur_axis(a, kernel, a.ndim - 2)
    return _blur_axis(out, kernel, a.ndim - 1)


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize over the last two axes, half-pixel-center sampling
    (identity at unit scale)."""
    h, w = img.shape[-2:]
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    tl = img[..., y0[:, None], x0[None, :]]
    tr = img[..., y0[:, None], x1[None, :]]
    bl = img[..., y1[:, None], x0[None, :]]
    br = img[..., y1[:, None], x1[None, :]]
    top = tl * (1 - wx) + tr * wx
    bot = bl * (1 - wx) + br * wx
    return top * (1 - wy) + bot * wy


def nearest_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize over the last two axes (binary-preserving)."""
    h, w = img.shape[-2:]
    ys = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.intp), h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.intp), w - 1)
    return img[..., ys[:, None], xs[None, :]]
