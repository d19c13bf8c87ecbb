"""Vessel-mixing consistency regularization for domain-adaptive artery/vein
segmentation, built on a finite-difference-verified numpy autodiff core."""

__version__ = "0.1.0"

__all__ = [
    "autodiff", "model", "perturb", "losses", "data", "metrics",
    "trainer", "verification", "cli", "errors", "imageops",
]
