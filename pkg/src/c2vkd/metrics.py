"""Confusion-matrix based segmentation metrics."""

from __future__ import annotations

import csv
import io

import numpy as np

from .pdd import IGNORE_INDEX


class ConfusionMatrix:
    """K×K pixel counts, rows = ground truth, columns = prediction."""

    def __init__(self, num_classes: int, counts=None):
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError(f"cannot merge {self.num_classes}- and {other.num_classes}-class matrices")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, pred, y) -> "ConfusionMatrix":
        return accumulate(self, pred, y)

    def miou(self):
        return miou(self)


def accumulate(cm: ConfusionMatrix, pred, y) -> ConfusionMatrix:
    """Add one count per non-ignore pixel at [label, prediction]."""
    pred = np.asarray(pred)
    y = np.asarray(y)
    if pred.shape != y.shape:
        raise ValueError(f"prediction shape {pred.shape} != label shape {y.shape}")
    K = cm.num_classes
    keep = y != IGNORE_INDEX
    yk = y[keep].astype(np.int64)
    pk = pred[keep].astype(np.int64)
    if yk.size and (yk.min() < 0 or yk.max() >= K or pk.min() < 0 or pk.max() >= K):
        raise ValueError(f"class index outside 0..{K - 1}")
    cm.counts += np.bincount(yk * K + pk, minlength=K * K).reshape(K, K)
    return cm


def miou(cm: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN for classes absent from both labels and predictions)
    and their mean over the present classes."""
    c = cm.counts.astype(np.float64)
    inter = np.diag(c)
    union = c.sum(axis=1) + c.sum(axis=0) - inter
    iou = np.full(cm.num_classes, np.nan)
    present = union > 0
    iou[present] = inter[present] / union[present]
    mean = float(iou[present].mean()) if present.any() else 0.0
    return iou, mean


def report_csv(iou: np.ndarray, mean: float) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class_id", "iou"])
    for k, v in enumerate(iou):
        w.writerow([k, "" if np.isnan(v) else f"{v:.6f}"])
    w.writerow(["miou", f"{mean:.6f}"])
    return buf.getvalue()


def report_table(iou: np.ndarray, mean: float) -> str:
    lines = ["class   IoU", "-----  ------"]
    for k, v in enumerate(iou):
        lines.append(f"{k:>5}  {'  n/a' if np.isnan(v) else f'{v:.4f}'}")
    lines.append(f"{'mIoU':>5}  {mean:.4f}")
    return "\n".join(lines)
