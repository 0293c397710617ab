# features/metrics.py

"""Streaming segmentation metrics: mIoU, mAcc, aAcc and boundary IoU."""

import logging
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.ndimage import binary_erosion

from config import Config
from util.errors import EmptyMatrixError, ShapeError, ValidationError
from util.numerics import image_diagonal

logger = logging.getLogger(__name__)

_CROSS = np.ones((3, 3), dtype=bool)


def _check_pair(pred: np.ndarray, gt: np.ndarray):
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ", pred=pred.shape, gt=gt.shape)


class ConfusionMatrix:
    """
    C x C integer counts, rows = ground truth, columns = prediction.
    Ignore-label pixels are dropped at accumulation. Counts only ever grow and
    matrices from separate workers merge by addition.
    """

    def __init__(self, num_classes: int, ignore_label: int = Config.IGNORE_LABEL, counts: np.ndarray | None = None):
        if num_classes < 1:
            raise ValidationError(f"num_classes must be >= 1, got {num_classes}")
        self.num_classes = num_classes
        self.ignore_label = ignore_label
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64) if counts is None else counts.astype(np.int64)

    def accumulate(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        _check_pair(pred, gt)
        C = self.num_classes
        valid = gt != self.ignore_label
        g = gt[valid].astype(np.int64)
        p = pred[valid].astype(np.int64)
        if p.size and (p.min() < 0 or p.max() >= C):
            raise ValidationError(f"prediction labels must lie in [0, {C}), found [{p.min()}, {p.max()}]")
        if g.size and (g.min() < 0 or g.max() >= C):
            raise ValidationError(f"ground-truth labels must lie in [0, {C}) or equal {self.ignore_label}")
        self.counts += np.bincount(C * g + p, minlength=C * C).reshape(C, C)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ShapeError(f"cannot merge {self.num_classes}-class and {other.num_classes}-class matrices")
        return ConfusionMatrix(self.num_classes, self.ignore_label, self.counts + other.counts)

    __add__ = merge

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def pixel_counts(self) -> dict:
        return {"gt": self.counts.sum(axis=1).tolist(), "pred": self.counts.sum(axis=0).tolist(), "total": self.total}


def accumulate(cm: ConfusionMatrix, pred: np.ndarray, gt: np.ndarray) -> ConfusionMatrix:
    return cm.accumulate(pred, gt)


@dataclass(frozen=True)
class Summary:
    per_class_iou: list  # None where the class is absent from gt and pred
    per_class_acc: list  # None where the class is absent from gt
    miou: float
    macc: float
    aacc: float

    def to_dict(self) -> dict:
        return {"per_class_iou": self.per_class_iou, "per_class_acc": self.per_class_acc,
                "miou": self.miou, "macc": self.macc, "aacc": self.aacc}


def summarize(cm: ConfusionMatrix) -> Summary:
    """
    IoU_c = TP / (TP + FP + FN). Classes absent from both gt and prediction are
    excluded from mIoU; classes absent from gt are excluded from mAcc. Computed
    exactly on the integer counts.
    """
    total = cm.total
    if total == 0:
        raise EmptyMatrixError("confusion matrix has no counted pixels")
    counts = cm.counts
    tp = np.diag(counts)
    gt_sum = counts.sum(axis=1)
    pred_sum = counts.sum(axis=0)

    ious, accs = [], []
    for c in range(cm.num_classes):
        union = int(gt_sum[c] + pred_sum[c] - tp[c])
        ious.append(Fraction(int(tp[c]), union) if union else None)
        accs.append(Fraction(int(tp[c]), int(gt_sum[c])) if gt_sum[c] else None)
    present_iou = [v for v in ious if v is not None]
    present_acc = [v for v in accs if v is not None]

    return Summary(
        per_class_iou=[float(v) if v is not None else None for v in ious],
        per_class_acc=[float(v) if v is not None else None for v in accs],
        miou=float(sum(present_iou) / len(present_iou)),
        macc=float(sum(present_acc) / len(present_acc)) if present_acc else 0.0,
        aacc=float(Fraction(int(tp.sum()), total)),
    )


def boundary_radius(shape: tuple[int, int], d_frac: float) -> int:
    if d_frac <= 0:
        raise ValidationError(f"d_frac must be > 0, got {d_frac}")
    return max(1, math.ceil(d_frac * image_diagonal(*shape)))


def boundary_band(region: np.ndarray, d: int) -> np.ndarray:
    """Pixels of region within Chebyshev distance d of its complement (the outside of the image counts as complement)."""
    eroded = binary_erosion(region, structure=_CROSS, iterations=d, border_value=0)
    return region & ~eroded


def _band_counts(pred: np.ndarray, gt: np.ndarray, classes, d: int, ignore_label: int):
    valid = gt != ignore_label
    out = {}
    for c in classes:
        pb = boundary_band(pred == c, d) & valid
        gb = boundary_band(gt == c, d) & valid
        union = int(np.count_nonzero(pb | gb))
        if union:
            out[int(c)] = (int(np.count_nonzero(pb & gb)), union)
    return out


def boundary_iou(pred: np.ndarray, gt: np.ndarray, d_frac: float = Config.BOUNDARY_DFRAC,
                 ignore_label: int = Config.IGNORE_LABEL) -> tuple[dict, float]:
    """
    Per-class boundary IoU between the boundary bands of width d = ceil(d_frac * diagonal)
    of prediction and ground truth, plus the mean over classes present in either.
    """
    _check_pair(pred, gt)
    d = boundary_radius(gt.shape, d_frac)
    classes = sorted(set(np.unique(gt[gt != ignore_label]).tolist()) | set(np.unique(pred[gt != ignore_label]).tolist()))
    counts = _band_counts(pred, gt, classes, d, ignore_label)
    if not counts:
        raise EmptyMatrixError("no class present outside the ignore region")
    per_class = {c: inter / union for c, (inter, union) in counts.items()}
    return per_class, float(np.mean(list(per_class.values())))


class BoundaryAccumulator:
    """Dataset-level boundary IoU: band intersections and unions summed per class across images."""

    def __init__(self, num_classes: int, d_frac: float = Config.BOUNDARY_DFRAC, ignore_label: int = Config.IGNORE_LABEL):
        self.num_classes = num_classes
        self.d_frac = d_frac
        self.ignore_label = ignore_label
        self.intersection = np.zeros(num_classes, dtype=np.int64)
        self.union = np.zeros(num_classes, dtype=np.int64)

    def accumulate(self, pred: np.ndarray, gt: np.ndarray) -> "BoundaryAccumulator":
        _check_pair(pred, gt)
        d = boundary_radius(gt.shape, self.d_frac)
        for c, (inter, union) in _band_counts(pred, gt, range(self.num_classes), d, self.ignore_label).items():
            self.intersection[c] += inter
            self.union[c] += union
        return self

    def merge(self, other: "BoundaryAccumulator") -> "BoundaryAccumulator":
        out = BoundaryAccumulator(self.num_classes, self.d_frac, self.ignore_label)
        out.intersection = self.intersection + other.intersection
        out.union = self.union + other.union
        return out

    def summarize(self) -> tuple[list, float | None]:
        per_class = [float(Fraction(int(i), int(u))) if u else None for i, u in zip(self.intersection, self.union)]
        present = [v for v in per_class if v is not None]
        return per_class, (float(np.mean(present)) if present else None)
