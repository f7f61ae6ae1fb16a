"""Confusion-matrix segmentation metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np


@dataclass
class ConfusionMatrix:
    """Counts indexed ``[ground truth, prediction]``; pixels labelled ``ignore_index`` are skipped."""

    n_classes: int
    ignore_index: int = 255
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.n_classes, self.n_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def update(self, pred, gt) -> ConfusionMatrix:
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
        keep = gt != self.ignore_index
        p, g = pred[keep].astype(np.int64), gt[keep].astype(np.int64)
        k = self.n_classes
        for name, arr in (("ground truth", g), ("prediction", p)):
            if arr.size and (arr.min() < 0 or arr.max() >= k):
                raise ValueError(f"{name} label outside [0, {k}): {arr.min()}..{arr.max()}")
        self.counts += np.bincount(g * k + p, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: ConfusionMatrix) -> ConfusionMatrix:
        if other.n_classes != self.n_classes:
            raise ValueError("cannot merge confusion matrices of different class counts")
        return ConfusionMatrix(self.n_classes, self.ignore_index, self.counts + other.counts)


def update(cm: ConfusionMatrix, pred, gt) -> ConfusionMatrix:
    return cm.update(pred, gt)


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    total = cm.total
    if total == 0:
        raise ValueError("pixel accuracy of an empty confusion matrix")
    return float(np.trace(cm.counts)) / total


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class; NaN marks classes absent from both prediction and ground truth."""
    if cm.total == 0:
        raise ValueError("IoU of an empty confusion matrix")
    tp = np.diag(cm.counts).astype(np.float64)
    union = cm.counts.sum(axis=0) + cm.counts.sum(axis=1) - tp
    iou = np.full(cm.n_classes, np.nan)
    ok = union > 0
    iou[ok] = tp[ok] / union[ok]
    return iou


def miou(cm: ConfusionMatrix) -> float:
    iou = per_class_iou(cm)
    if np.all(np.isnan(iou)):
        raise ValueError("no class has a defined IoU")
    return float(np.nanmean(iou))


def summarize(cm: ConfusionMatrix) -> dict:
    return {"pixel_acc": pixel_accuracy(cm), "miou": miou(cm), "per_class_iou": per_class_iou(cm)}


def exact_summary(cm: ConfusionMatrix) -> dict:
    """Pixel accuracy, per-class IoU (None when undefined) and mIoU as exact fractions."""
    c = cm.counts
    if cm.total == 0:
        raise ValueError("metrics of an empty confusion matrix")
    ious = []
    for k in range(cm.n_classes):
        union = int(c[:, k].sum() + c[k, :].sum() - c[k, k])
        ious.append(Fraction(int(c[k, k]), union) if union else None)
    defined = [v for v in ious if v is not None]
    if not defined:
        raise ValueError("no class has a defined IoU")
    return {"pixel_acc": Fraction(int(np.trace(c)), cm.total), "per_class_iou": ious,
            "miou": sum(defined, Fraction(0)) / len(defined)}


CSV_FIELDS = ("epoch", "task", "metric", "value")


def write_metrics_csv(path, rows) -> None:
    """Rows of ``(epoch, task, metric, value)``, one per line."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for epoch, task, metric, value in rows:
            w.writerow([epoch, task, metric, repr(float(value))])
