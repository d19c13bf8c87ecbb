"""Guidance-mask generation, regional mixing of images/predictions, and
invertible spatial transforms (the flip/rotate consistency baseline and
supervised augmentation)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .imageops import bilinear_resize, gaussian_blur, nearest_resize


@dataclass
class Mask:
    bits: np.ndarray  # uint8 matrix of {0, 1}
    sigma: float
    seed: int

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]


def gen_mask(h: int, w: int, sigma: float, seed: int) -> Mask:
    """Binary guidance mask: i.i.d. standard-normal field, Gaussian blur,
    threshold at the post-blur mean (>= maps to 1)."""
    rng = np.random.default_rng(seed)
    field = rng.standard_normal((h, w))
    if sigma > 0:
        field = gaussian_blur(field, sigma)
    bits = (field >= field.mean()).astype(np.uint8)
    return Mask(bits=bits, sigma=sigma, seed=seed)


def _mask_bits(m) -> np.ndarray:
    return m.bits if isinstance(m, Mask) else np.asarray(m)


def mix_images(x1: np.ndarray, x2: np.ndarray, m) -> np.ndarray:
    """Regional mix: m*x1 + (1-m)*x2, exact per-pixel selection.

    The mask broadcasts across leading batch/channel axes."""
    x1 = np.asarray(x1)
    x2 = np.asarray(x2)
    bits = _mask_bits(m)
    if x1.shape != x2.shape:
        raise ShapeError(f"image shapes differ: {x1.shape} vs {x2.shape}")
    if x1.shape[-2:] != bits.shape:
        raise ShapeError(f"mask {bits.shape} vs image spatial {x1.shape[-2:]}")
    sel = bits.astype(bool)
    return np.where(sel, x1, x2)


def mix_predictions(p1: np.ndarray, p2: np.ndarray, m) -> np.ndarray:
    """Same regional mix applied to posterior maps."""
    return mix_images(p1, p2, m)


@dataclass
class SpatialTransform:
    """Deterministic spatial perturbation over the trailing (H, W) axes.

    flip/rot90 are exactly invertible; scale uses bilinear interpolation
    re-cropped/padded to the original size and has no exact inverse."""
    kind: str  # "flip-h" | "flip-v" | "rot90" | "scale"
    k: int = 1           # quarter turns for rot90
    scale: float = 1.0   # factor for scale

    @property
    def invertible(self) -> bool:
        return self.kind != "scale"

    def inverse(self) -> "SpatialTransform":
        if not self.invertible:
            raise ValueError("scale transform has no exact inverse")
        if self.kind == "rot90":
            return SpatialTransform("rot90", k=(-self.k) % 4)
        return SpatialTransform(self.kind)


def apply_spatial(x: np.ndarray, t: SpatialTransform,
                  interp: str = "bilinear") -> np.ndarray:
    x = np.asarray(x)
    if t.kind == "flip-h":
        return np.flip(x, axis=-1).copy()
    if t.kind == "flip-v":
        return np.flip(x, axis=-2).copy()
    if t.kind == "rot90":
        return np.rot90(x, k=t.k, axes=(-2, -1)).copy()
    if t.kind == "scale":
        return _apply_scale(x, t.scale, interp)
    raise ValueError(f"unknown transform kind {t.kind!r}")


def apply_spatial_to_prediction(p: np.ndarray, t: SpatialTransform) -> np.ndarray:
    """Identical geometry on prediction/label maps; nearest interpolation so
    binary maps stay binary under scaling."""
    return apply_spatial(p, t, interp="nearest")


def _apply_scale(x: np.ndarray, factor: float, interp: str) -> np.ndarray:
    h, w = x.shape[-2:]
    nh = max(1, round(h * factor))
    nw = max(1, round(w * factor))
    resize = bilinear_resize if interp == "bilinear" else nearest_resize
    scaled = resize(x.astype(np.float64), nh, nw)
    out = np.zeros(x.shape, dtype=np.float64)
    # center crop (zoom in) or center pad with edge replication (zoom out)
    if nh >= h:
        y0, x0 = (nh - h) // 2, (nw - w) // 2
        out[...] = scaled[..., y0:y0 + h, x0:x0 + w]
    else:
        y0, x0 = (h - nh) // 2, (w - nw) // 2
        pad = [(0, 0)] * (x.ndim - 2) + [(y0, h - nh - y0), (x0, w - nw - x0)]
        out[...] = np.pad(scaled, pad, mode="edge")
    return out.astype(x.dtype) if x.dtype.kind == "f" else out


def random_spatial(rng: np.random.Generator,
                   include_scale: bool = True) -> SpatialTransform:
    """Draw a supervised-augmentation transform (flip / rot90 / scale)."""
    kinds = ["flip-h", "flip-v", "rot90", "scale"] if include_scale else \
            ["flip-h", "flip-v", "rot90"]
    kind = kinds[rng.integers(len(kinds))]
    if kind == "rot90":
        return SpatialTransform("rot90", k=int(rng.integers(1, 4)))
    if kind == "scale":
        return SpatialTransform("scale", scale=float(rng.uniform(0.8, 1.25)))
    return SpatialTransform(kind)
