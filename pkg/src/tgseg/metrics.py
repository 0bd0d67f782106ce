"""Binary-mask Dice and IoU."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError

EPS = 1e-6


def compute_metrics(pred: np.ndarray, gt: np.ndarray, eps: float = EPS) -> tuple[float, float]:
    """Smoothed (dice, iou) of two binary masks of equal shape."""
    p = np.asarray(pred)
    g = np.asarray(gt)
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} vs ground truth {g.shape}")
    p = p.astype(bool)
    g = g.astype(bool)
    inter = float(np.count_nonzero(p & g))
    sp, sg = float(np.count_nonzero(p)), float(np.count_nonzero(g))
    dice = (2 * inter + eps) / (sp + sg + eps)
    iou = (inter + eps) / (sp + sg - inter + eps)
    return dice, iou


def batch_metrics(preds: np.ndarray, gts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample dice and IoU over the leading axis."""
    pairs = [compute_metrics(p, g) for p, g in zip(preds, gts)]
    if not pairs:
        return np.zeros(0), np.zeros(0)
    d, i = zip(*pairs)
    return np.asarray(d), np.asarray(i)


@dataclass
class MetricsReport:
    dice: list[float] = field(default_factory=list)
    iou: list[float] = field(default_factory=list)
    step: int = 0
    wallclock: float = 0.0

    @property
    def mdice(self) -> float:
        return float(np.mean(self.dice)) if self.dice else 0.0

    @property
    def miou(self) -> float:
        return float(np.mean(self.iou)) if self.iou else 0.0
