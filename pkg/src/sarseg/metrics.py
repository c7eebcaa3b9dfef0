"""Confusion-matrix accumulation and segmentation metrics.

Counts n[i, j] index target class i and predicted class j; pixels whose
target is the unlabeled code are excluded everywhere. Matrices are
integer-valued and mergeable, so per-tile accumulation with a final merge
is exact and order-independent.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from .raster import LABEL_UNLABELED


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # (C, C) int64, rows = target, cols = predicted

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError(f"counts must be square, got shape {c.shape}")
        if c.dtype != np.int64:
            c = c.astype(np.int64)
        if (c < 0).any():
            raise ValueError("counts must be non-negative")
        object.__setattr__(self, "counts", c)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(pred: np.ndarray, target: np.ndarray, num_classes: int = 3,
              ignore: int = LABEL_UNLABELED) -> ConfusionMatrix:
    """Count (target, prediction) pairs over pixels whose target != ignore."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"dimension mismatch: {pred.shape} vs {target.shape}")
    if np.any(pred == ignore):
        raise ValueError(f"prediction contains the ignore code {ignore}")
    keep = target != ignore
    t = target[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if t.size and (t.max() >= num_classes or p.max() >= num_classes):
        raise ValueError(f"class codes exceed num_classes={num_classes}")
    flat = np.bincount(t * num_classes + p, minlength=num_classes * num_classes)
    return ConfusionMatrix(flat.reshape(num_classes, num_classes))


def merge(a: ConfusionMatrix, b: ConfusionMatrix) -> ConfusionMatrix:
    if a.num_classes != b.num_classes:
        raise ValueError(f"class count mismatch: {a.num_classes} vs {b.num_classes}")
    return ConfusionMatrix(a.counts + b.counts)


def metrics(m: ConfusionMatrix) -> Dict[str, float]:
    """Pixel accuracy, mean per-class accuracy, and mean IoU.

    PA = trace / total. MA averages per-class recall, mIoU averages
    diag / (row + col - diag); classes with zero target pixels are dropped
    from both averages. The union denominator subtracts the diagonal so a
    perfect prediction scores 1.
    """
    c = m.counts.astype(np.float64)
    total = c.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    diag = np.diag(c)
    row = c.sum(axis=1)
    col = c.sum(axis=0)
    present = row > 0
    pa = diag.sum() / total
    ma = float(np.mean(diag[present] / row[present]))
    union = row + col - diag
    miou = float(np.mean(diag[present] / union[present]))
    return {"PA": float(pa), "MA": ma, "mIoU": miou}


def per_class_report(m: ConfusionMatrix) -> list:
    """Rows of (class, precision, recall, IoU); NaN where undefined."""
    c = m.counts.astype(np.float64)
    diag = np.diag(c)
    row = c.sum(axis=1)
    col = c.sum(axis=0)
    union = row + col - diag
    rows = []
    for i in range(m.num_classes):
        precision = diag[i] / col[i] if col[i] > 0 else float("nan")
        recall = diag[i] / row[i] if row[i] > 0 else float("nan")
        iou = diag[i] / union[i] if union[i] > 0 else float("nan")
        rows.append((i, float(precision), float(recall), float(iou)))
    return rows


def write_report_csv(m: ConfusionMatrix, path) -> Dict[str, float]:
    """CSV with per-class precision/recall/IoU and PA/MA/mIoU footer rows."""
    summary = metrics(m)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class", "precision", "recall", "IoU"])
        for cls, precision, recall, iou in per_class_report(m):
            w.writerow([cls, f"{precision:.6f}", f"{recall:.6f}", f"{iou:.6f}"])
        for key in ("PA", "MA", "mIoU"):
            w.writerow([key, f"{summary[key]:.6f}", "", ""])
    return summary
