"""Dice loss and the overlap metrics used for evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DTYPE, ShapeError, Tensor, from_op


@dataclass(frozen=True)
class DiceConfig:
    smoothing: float = 1.0  # lambda
    threshold: float = 0.5

    def __post_init__(self):
        if self.smoothing <= 0:
            raise ValueError(f"smoothing must be > 0, got {self.smoothing}")
        if not 0 < self.threshold < 1:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")


def dice_loss(pred: Tensor, target, smoothing: float = 1.0) -> Tensor:
    """``1 - (2 sum(p t) + lam) / (sum p + sum t + lam)`` over every element.

    Differentiable with respect to ``pred``; ``target`` is treated as constant.
    """
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=DTYPE)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    p = pred.data.astype(np.float64)
    t = target.astype(np.float64)
    num = 2.0 * np.sum(p * t) + smoothing
    den = np.sum(p) + np.sum(t) + smoothing
    loss = np.asarray(1.0 - num / den, dtype=DTYPE)

    def backward(g: np.ndarray):
        dp = (num - 2.0 * t * den) / (den * den)
        return ((float(g) * dp).astype(DTYPE),)

    return from_op(loss, (pred,), backward, "dice_loss")


def threshold(pred, t: float = 0.5) -> np.ndarray:
    """Binary mask: 1 where ``pred >= t``."""
    data = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    return (data >= t).astype(np.uint8)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _as_binary(x, name: str) -> np.ndarray:
    arr = np.asarray(x.data if isinstance(x, Tensor) else x)
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must be binary (0/1)")
    return arr.astype(bool)


def confusion_counts(pred_bin, target_bin) -> ConfusionCounts:
    p = _as_binary(pred_bin, "prediction")
    t = _as_binary(target_bin, "target")
    if p.shape != t.shape:
        raise ShapeError(f"prediction shape {p.shape} != target shape {t.shape}")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, fn, int(p.size) - tp - fp - fn)


def _ratio(num: int, den: int) -> float:
    return 0.0 if den == 0 else num / den


def metrics(c: ConfusionCounts) -> dict[str, float]:
    """DSC, IoU, recall and precision.

    When the target and the prediction are both empty every score is 1;
    otherwise a 0/0 ratio scores 0 (e.g. recall for an empty target).
    """
    if c.tp + c.fp + c.fn == 0:
        return {"dsc": 1.0, "iou": 1.0, "recall": 1.0, "precision": 1.0}
    return {
        "dsc": 2 * c.tp / ((c.tp + c.fp) + (c.tp + c.fn)),
        "iou": c.tp / (c.tp + c.fp + c.fn),
        "recall": _ratio(c.tp, c.tp + c.fn),
        "precision": _ratio(c.tp, c.tp + c.fp),
    }


METRIC_NAMES = ("dsc", "iou", "recall", "precision")


def image_metrics(pred, target, t: float = 0.5) -> dict[str, float]:
    return metrics(confusion_counts(threshold(pred, t), target))


def mean_metrics(rows: list[dict[str, float]]) -> dict[str, float]:
    if not rows:
        raise ValueError("no per-image scores to average")
    return {k: float(np.mean([r[k] for r in rows])) for k in METRIC_NAMES}
