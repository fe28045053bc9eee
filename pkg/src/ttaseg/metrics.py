"""Confusion-matrix accounting and mean intersection-over-union."""

from __future__ import annotations

import numpy as np


class ConfusionMatrix:
    """L×L counts, rows indexed by ground truth, columns by prediction."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64) if counts is None else counts

    def accumulate(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        pred = np.asarray(pred).astype(np.int64).ravel()
        gt = np.asarray(gt).astype(np.int64).ravel()
        if pred.shape != gt.shape:
            raise ValueError(f"prediction and ground truth sizes differ: {pred.shape} vs {gt.shape}")
        l = self.num_classes
        for name, a in (("prediction", pred), ("ground truth", gt)):
            if a.size and (a.min() < 0 or a.max() >= l):
                raise ValueError(f"{name} label out of range [0, {l})")
        self.counts += np.bincount(gt * l + pred, minlength=l * l).reshape(l, l)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def copy(self) -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts.copy())

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, pred, gt) -> ConfusionMatrix:
    return cm.accumulate(pred, gt)


def miou(cm: ConfusionMatrix) -> tuple[list[float | None], float]:
    """Per-class IoU (None where the union is empty) and their mean over defined classes."""
    c = cm.counts
    tp = np.diag(c).astype(np.float64)
    union = c.sum(axis=0) + c.sum(axis=1) - tp
    defined = union > 0
    if not defined.any():
        raise ValueError("mIoU undefined: no pixels evaluated")
    ious = [float(tp[i] / union[i]) if defined[i] else None for i in range(cm.num_classes)]
    return ious, float(np.mean([v for v in ious if v is not None]))
