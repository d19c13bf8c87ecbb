"""Artery/vein classification metrics, scored on ground-truth vessel pixels
only, plus consistency-loss-map export."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .autodiff import _sigmoid
from .data import LabelMap
from .errors import EmptyEvalError, ShapeError


@dataclass
class ConfusionCounts:
    artery_as_artery: int = 0
    artery_as_vein: int = 0
    vein_as_vein: int = 0
    vein_as_artery: int = 0
    excluded_crossings: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.artery_as_artery + other.artery_as_artery,
            self.artery_as_vein + other.artery_as_vein,
            self.vein_as_vein + other.vein_as_vein,
            self.vein_as_artery + other.vein_as_artery,
            self.excluded_crossings + other.excluded_crossings,
        )

    @property
    def total_counted(self) -> int:
        return (self.artery_as_artery + self.artery_as_vein
                + self.vein_as_vein + self.vein_as_artery)


@dataclass
class MetricsRow:
    f1: float | None
    acc: float | None
    sen: float | None
    sp: float | None
    aggregate: bool = False

    def csv_fields(self) -> list[str]:
        return ["" if v is None else f"{v:.6f}"
                for v in (self.f1, self.acc, self.sen, self.sp)]


def classify_pixels(posteriors: np.ndarray, labels: LabelMap) -> ConfusionCounts:
    """Argmax A/V decision restricted to ground-truth vessel pixels.

    Crossing pixels (both labels set) are excluded from counts but tallied.
    Ties in the posteriors go to artery."""
    p = np.asarray(posteriors)
    if p.ndim == 4:
        if p.shape[0] != 1:
            raise ShapeError("pass one image at a time (or sum counts)")
        p = p[0]
    if p.ndim != 3 or p.shape[0] != 2:
        raise ShapeError(f"expected 2 x H x W posteriors, got {p.shape}")
    if p.shape[1:] != labels.artery.shape:
        raise ShapeError(f"posterior spatial {p.shape[1:]} vs labels "
                         f"{labels.artery.shape}")
    pred_artery = p[0] >= p[1]
    is_a = labels.artery.astype(bool)
    is_v = labels.vein.astype(bool)
    crossing = is_a & is_v
    a_only = is_a & ~crossing
    v_only = is_v & ~crossing
    return ConfusionCounts(
        artery_as_artery=int(np.count_nonzero(a_only & pred_artery)),
        artery_as_vein=int(np.count_nonzero(a_only & ~pred_artery)),
        vein_as_vein=int(np.count_nonzero(v_only & ~pred_artery)),
        vein_as_artery=int(np.count_nonzero(v_only & pred_artery)),
        excluded_crossings=int(np.count_nonzero(crossing)),
    )


def compute_metrics(c: ConfusionCounts, aggregate: bool = False) -> MetricsRow:
    """Acc/Sen/Sp/F1 with artery as the positive class. Undefined ratios are
    reported as None, never faked as 0."""
    if c.total_counted == 0:
        raise EmptyEvalError("no scoreable vessel pixels")
    aa, av = c.artery_as_artery, c.artery_as_vein
    vv, va = c.vein_as_vein, c.vein_as_artery

    def ratio(num, den):
        return num / den if den else None

    return MetricsRow(
        f1=ratio(2 * aa, 2 * aa + av + va),
        acc=(aa + vv) / c.total_counted,
        sen=ratio(aa, aa + av),
        sp=ratio(vv, vv + va),
        aggregate=aggregate,
    )


LOSS_MAP_SCALE = 0.25  # fixed linear PNG scale: [0, 0.25] -> [0, 255]


def loss_map(student_logits: np.ndarray, target_posterior: np.ndarray):
    """Per-pixel squared error between the student posterior and a perturbed
    teacher posterior, averaged over the two channels.

    Returns (H x W map, scalar mean)."""
    z = np.asarray(student_logits, dtype=np.float64)
    t = np.asarray(target_posterior, dtype=np.float64)
    if z.ndim == 4:
        z, t = z[0], t[0]
    if z.shape != t.shape or z.ndim != 3 or z.shape[0] != 2:
        raise ShapeError(f"expected matching 2 x H x W maps, got {z.shape} "
                         f"vs {t.shape}")
    sq = (_sigmoid(z) - t) ** 2
    m = sq.mean(axis=0)
    return m, float(m.mean())


def export_loss_map(m: np.ndarray, out_dir: str, tag: str) -> str:
    """Write the map as 8-bit grayscale; the fixed scale is part of the name."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"lossmap_{tag}_scale0to{LOSS_MAP_SCALE}.png")
    scaled = np.clip(m / LOSS_MAP_SCALE, 0.0, 1.0)
    Image.fromarray((scaled * 255).round().astype(np.uint8), mode="L").save(path)
    return path
