"""Confusion matrices and mIoU."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .scene_io import IGNORE_LABEL


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    class_count: int
    counts: np.ndarray = field(default=None)
    ignored: int = 0

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.class_count, self.class_count), dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (self.class_count, self.class_count):
            raise ValueError("counts must be L x L")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.class_count != self.class_count:
            raise ValueError("cannot merge matrices with different class counts")
        return ConfusionMatrix(self.class_count, self.counts + other.counts, self.ignored + other.ignored)

    def copy(self) -> "ConfusionMatrix":
        return ConfusionMatrix(self.class_count, self.counts.copy(), self.ignored)


def accumulate(cm: ConfusionMatrix, gt: np.ndarray, pred: np.ndarray) -> ConfusionMatrix:
    """Return a new matrix with every non-ignore (gt, pred) pair counted."""
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch: gt {gt.shape} vs pred {pred.shape}")
    L = cm.class_count
    keep = gt != IGNORE_LABEL
    g = gt[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if g.size and (g.min() < 0 or g.max() >= L or p.min() < 0 or p.max() >= L):
        raise ValueError("label outside [0, class_count)")
    counts = np.bincount(g * L + p, minlength=L * L).reshape(L, L)
    return ConfusionMatrix(L, cm.counts + counts, cm.ignored + int((~keep).sum()))


def miou(cm: ConfusionMatrix, absent: str = "exclude") -> tuple[float, np.ndarray]:
    """Mean IoU and the per-class IoU vector.

    Classes that appear in neither ground truth nor prediction get NaN IoU and
    are left out of the mean (`absent="exclude"`) or counted as 0
    (`absent="zero"`).
    """
    if cm.total == 0:
        raise ValueError("confusion matrix is empty")
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    union = c.sum(0) + c.sum(1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    if absent == "exclude":
        return float(np.nanmean(iou)), iou
    if absent == "zero":
        return float(np.nan_to_num(iou).mean()), iou
    raise ValueError(f"unknown absent-class policy {absent!r}")


def average_miou(values: Iterable[float]) -> float:
    """Plain mean of per-scene mIoUs."""
    values = list(values)
    if not values:
        raise ValueError("no scenes to average")
    return float(np.mean(values))


@dataclass
class ViewScore:
    view: str
    miou: float
    ious: np.ndarray
    pixels: int


def write_scores_csv(path: str | Path, scores: Sequence[ViewScore], aggregate: ConfusionMatrix, class_names: Sequence[str]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    agg_miou, agg_ious = miou(aggregate)
    names = list(class_names) or [f"class{i}" for i in range(aggregate.class_count)]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["view", "pixels", "miou"] + [f"iou_{n}" for n in names])
        for s in scores:
            w.writerow([s.view, s.pixels, f"{s.miou:.6f}"] + [f"{v:.6f}" for v in s.ious])
        w.writerow(["ALL", aggregate.total, f"{agg_miou:.6f}"] + [f"{v:.6f}" for v in agg_ious])


def format_table(scores: Sequence[ViewScore], aggregate: ConfusionMatrix) -> str:
    agg, _ = miou(aggregate)
    lines = [f"{'view':>8} {'pixels':>8} {'mIoU':>8}"]
    lines += [f"{s.view:>8} {s.pixels:>8d} {s.miou:>8.4f}" for s in scores]
    lines.append(f"{'ALL':>8} {aggregate.total:>8d} {agg:>8.4f}")
    return "\n".join(lines)
