"""Confusion-matrix based segmentation scores."""
from dataclasses import dataclass, field
from typing import Tuple, Union

import numpy as np
import torch

from exceptions import ShapeError
from models import IGNORE_INDEX

LabelArray = Union[np.ndarray, torch.Tensor]


def _as_numpy(labels: LabelArray) -> np.ndarray:
    if isinstance(labels, torch.Tensor):
        labels = labels.detach().cpu().numpy()
    return np.asarray(labels).astype(np.int64, copy=False)


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions; ignored pixels are never counted."""

    num_classes: int
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("a confusion matrix needs at least one class")
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        elif self.counts.shape != (self.num_classes, self.num_classes):
            raise ShapeError(f"counts must be {self.num_classes}x{self.num_classes}, got {self.counts.shape}")

    def _joint_counts(self, pred: LabelArray, gt: LabelArray) -> np.ndarray:
        pred, gt = _as_numpy(pred), _as_numpy(gt)
        if pred.shape != gt.shape:
            raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
        valid = gt != IGNORE_INDEX
        gt, pred = gt[valid], pred[valid]
        n = self.num_classes
        if gt.size and (gt.min() < 0 or gt.max() >= n):
            raise ValueError(f"ground-truth class out of range [0, {n})")
        if pred.size and (pred.min() < 0 or pred.max() >= n):
            raise ValueError(f"predicted class out of range [0, {n})")
        return np.bincount(n * gt + pred, minlength=n * n).reshape(n, n)

    def update(self, pred: LabelArray, gt: LabelArray) -> "ConfusionMatrix":
        """In-place accumulation; returns self."""
        self.counts += self._joint_counts(pred, gt)
        return self

    def accumulate(self, pred: LabelArray, gt: LabelArray) -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + self._joint_counts(pred, gt))

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ShapeError("cannot merge confusion matrices of different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou(self) -> Tuple[np.ndarray, float]:
        """Per-class IoU (NaN where the union is empty) and their mean over the remaining classes."""
        intersection = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - np.diag(self.counts)
        included = union > 0
        if not included.any():
            raise ValueError("every class has an empty union; mIoU is undefined")
        per_class = np.full(self.num_classes, np.nan)
        per_class[included] = intersection[included] / union[included]
        return per_class, float(per_class[included].mean())

    def pixel_accuracy(self) -> float:
        if not self.total:
            raise ValueError("no pixels have been counted")
        return float(np.diag(self.counts).sum() / self.total)


def accumulate(cm: ConfusionMatrix, pred: LabelArray, gt: LabelArray) -> ConfusionMatrix:
    return cm.accumulate(pred, gt)


def iou(cm: ConfusionMatrix) -> Tuple[np.ndarray, float]:
    return cm.iou()


def relative_generalization(gen_miou: float, oracle_miou: float) -> float:
    """Generalization mIoU as a percentage of the oracle, rounded to one decimal."""
    if oracle_miou <= 0:
        raise ValueError(f"oracle mIoU must be positive, got {oracle_miou}")
    return round(100.0 * gen_miou / oracle_miou, 1)
