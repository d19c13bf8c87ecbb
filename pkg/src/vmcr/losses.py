"""Supervised weighted BCE, mixing-consistency MSE, the adaptive trade-off
weight, their combination, and the EMA teacher update."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, bce_with_logits
from .errors import ConfigError, DataError, ShapeError
from .perturb import mix_predictions


@dataclass
class LossConfig:
    pos_weight: float = 10.0
    ema_alpha: float = 0.99
    confidence_threshold: float = 0.8
    lambda_scale: float = 1.0
    # confidence of a sigmoid output: max(p, 1-p) when True (confident
    # background counts), plain p >= tau when False
    two_sided_confidence: bool = True

    def __post_init__(self):
        if self.pos_weight <= 0:
            raise ConfigError(f"pos_weight must be > 0, got {self.pos_weight}")
        if not 0 <= self.ema_alpha < 1:
            raise ConfigError(f"ema_alpha must be in [0,1), got {self.ema_alpha}")
        if not 0.5 < self.confidence_threshold < 1:
            raise ConfigError("confidence_threshold must be in (0.5, 1), "
                              f"got {self.confidence_threshold}")
        if self.lambda_scale < 0:
            raise ConfigError("lambda_scale must be >= 0")


@dataclass
class LossReport:
    supervised: float
    consistency: float | None
    lam: float
    total: float
    teacher_confidence: float


def supervised_loss(logits: Tensor, labels: np.ndarray, pos_weight: float = 10.0) -> Tensor:
    """Sum over the two class channels of the per-channel pixel-mean weighted
    BCE-with-logits. Channel 0 = artery, 1 = vein; crossings carry 1 in both.
    """
    labels = np.asarray(labels)
    if labels.shape != logits.shape:
        raise ShapeError(f"labels {labels.shape} vs logits {logits.shape}")
    if logits.data.ndim != 4 or logits.shape[1] != 2:
        raise ShapeError(f"expected N x 2 x H x W logits, got {logits.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise DataError("labels must be binary {0,1}")
    per_elem = bce_with_logits(logits, labels.astype(logits.dtype, copy=False),
                               pos_weight=pos_weight)
    # sum of the two per-channel means == total sum / (N*H*W)
    n, _, h, w = logits.shape
    return per_elem.sum() / float(n * h * w)


def consistency_loss(student_logits: Tensor, teacher_post_1: np.ndarray,
                     teacher_post_2: np.ndarray, mask) -> Tensor:
    """MSE between the student posterior on the mixed input and the regional
    mix of the two teacher posteriors. Teacher side is a constant."""
    target = mix_predictions(teacher_post_1, teacher_post_2, mask)
    return mse_to_target(student_logits, target)


def mse_to_target(student_logits: Tensor, target_post: np.ndarray) -> Tensor:
    """Mean squared error between sigmoid(student logits) and a constant
    posterior target (also used by the spatial-transform baseline)."""
    target_post = np.asarray(target_post, dtype=student_logits.dtype)
    if target_post.shape != student_logits.shape:
        raise ShapeError(f"target {target_post.shape} vs "
                         f"student {student_logits.shape}")
    diff = student_logits.sigmoid() - Tensor(target_post)
    return (diff * diff).mean()


def adaptive_lambda(teacher_post: np.ndarray, threshold: float = 0.8,
                    lambda_scale: float = 1.0, two_sided: bool = True) -> float:
    """Fraction of pixel-channel teacher predictions that are confident,
    times lambda_scale."""
    p = np.asarray(teacher_post)
    conf = np.maximum(p, 1 - p) if two_sided else p
    return float((conf >= threshold).mean()) * lambda_scale


def total_loss(l_s: Tensor, r_c: Tensor | None, lam: float,
               teacher_confidence: float = 0.0) -> tuple[Tensor, LossReport]:
    """L = L_S + lam * R_C; lam is a constant (no gradient through it).

    With lam == 0 or no consistency term, the total is exactly L_S so the
    regularizer is cleanly additive."""
    if r_c is None or lam == 0.0:
        total = l_s
    else:
        total = l_s + float(lam) * r_c
    report = LossReport(
        supervised=float(l_s.data),
        consistency=None if r_c is None else float(r_c.data),
        lam=float(lam),
        total=float(total.data),
        teacher_confidence=float(teacher_confidence),
    )
    return total, report


def ema_update(student: dict[str, Tensor], teacher: dict[str, Tensor], alpha: float):
    """In-place teacher <- alpha*teacher + (1-alpha)*student."""
    if set(student) != set(teacher):
        raise ShapeError("student/teacher parameter names differ")
    for name, s in student.items():
        t = teacher[name]
        if t.data.shape != s.data.shape:
            raise ShapeError(f"shape mismatch for {name!r}: "
                             f"{t.data.shape} vs {s.data.shape}")
        t.data *= alpha
        t.data += (1.0 - alpha) * s.data
