"""Overlap metrics for integer label maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


def _check(pred: np.ndarray, gt: np.ndarray) -> None:
    if np.shape(pred) != np.shape(gt):
        raise ValidationError(f"prediction shape {np.shape(pred)} != ground truth {np.shape(gt)}")


def dice(pred: np.ndarray, gt: np.ndarray, c: int) -> float:
    """2|P & G| / (|P| + |G|) for class ``c``; 1.0 when the class is absent from both."""
    _check(pred, gt)
    p, g = np.asarray(pred) == c, np.asarray(gt) == c
    denom = p.sum() + g.sum()
    return 1.0 if denom == 0 else 2.0 * np.logical_and(p, g).sum() / denom


def iou(pred: np.ndarray, gt: np.ndarray, c: int) -> float:
    """|P & G| / |P | G| for class ``c``; 1.0 when the class is absent from both."""
    _check(pred, gt)
    p, g = np.asarray(pred) == c, np.asarray(gt) == c
    union = np.logical_or(p, g).sum()
    return 1.0 if union == 0 else np.logical_and(p, g).sum() / union


@dataclass
class MetricReport:
    dice: list[float]  # per class
    iou: list[float]
    pred_pixels: list[int]
    gt_pixels: list[int]
    foreground_dice: float
    foreground_iou: float

    def to_dict(self) -> dict:
        return {"dice": self.dice, "iou": self.iou, "pred_pixels": self.pred_pixels,
                "gt_pixels": self.gt_pixels, "foreground_dice": self.foreground_dice,
                "foreground_iou": self.foreground_iou}


def report(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> MetricReport:
    """Pixel counts pooled over every map in the batch, then per-class and foreground means."""
    _check(pred, gt)
    pred, gt = np.asarray(pred), np.asarray(gt)
    d, j, pp, gp = [], [], [], []
    for c in range(num_classes):
        p, g = pred == c, gt == c
        inter = int(np.logical_and(p, g).sum())
        ps, gs = int(p.sum()), int(g.sum())
        union = ps + gs - inter
        d.append(1.0 if ps + gs == 0 else 2.0 * inter / (ps + gs))
        j.append(1.0 if union == 0 else inter / union)
        pp.append(ps)
        gp.append(gs)
    fg = slice(1, num_classes)
    return MetricReport(d, j, pp, gp, float(np.mean(d[fg])), float(np.mean(j[fg])))


def mean_std(values) -> tuple[float, float]:
    v = np.asarray(list(values), dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0
