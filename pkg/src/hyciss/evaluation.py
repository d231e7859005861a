"""Confusion-matrix based mIoU over base/novel/all class partitions."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import IGNORE
from .errors import EmptyPartitionError, ShapeMismatchError


class ConfusionMatrix:
    """Pixel counts indexed [ground truth, prediction] over ids 0..n_ids-1
    (background row/column included, ignore pixels skipped)."""

    def __init__(self, n_ids: int):
        self.n_ids = n_ids
        self.counts = np.zeros((n_ids, n_ids), dtype=np.int64)


def accumulate(cm: ConfusionMatrix, pred: np.ndarray, gt: np.ndarray) -> ConfusionMatrix:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    keep = gt != IGNORE
    p = pred[keep].astype(np.int64)
    g = gt[keep].astype(np.int64)
    if p.size and (p.max() >= cm.n_ids or g.max() >= cm.n_ids or p.min() < 0 or g.min() < 0):
        raise ValueError("label id outside the confusion matrix range")
    flat = np.bincount(g * cm.n_ids + p, minlength=cm.n_ids * cm.n_ids)
    cm.counts += flat.reshape(cm.n_ids, cm.n_ids)
    return cm


@dataclass
class MIoUReport:
    step: int
    per_class: dict = field(default_factory=dict)  # id -> IoU percent
    miou_base: float | None = None
    miou_novel: float | None = None
    miou_all: float | None = None


def report(cm: ConfusionMatrix, partition, step: int = 0) -> MIoUReport:
    """Per-class IoU (percent) and means over the base / novel / union sets.

    Classes absent from both ground truth and prediction are excluded from
    the means; background is never part of any mean. A side of the partition
    with no evaluable class reports None.
    """
    base, novel = partition
    base = tuple(base)
    novel = tuple(novel)
    if not base and not novel:
        raise EmptyPartitionError("metric partition holds no classes")
    diag = np.diag(cm.counts).astype(np.float64)
    rows = cm.counts.sum(axis=1).astype(np.float64)
    cols = cm.counts.sum(axis=0).astype(np.float64)
    union = rows + cols - diag
    rep = MIoUReport(step=step)
    for k in sorted(base + novel):
        if union[k] > 0:
            rep.per_class[k] = 100.0 * diag[k] / union[k]
    present = set(rep.per_class)
    if not present:
        raise EmptyPartitionError("no partition class present in the confusion matrix")

    def _mean(ids):
        ids = [k for k in ids if k in present]
        if not ids:
            return None
        return float(np.mean([rep.per_class[k] for k in ids]))

    rep.miou_base = _mean(base)
    rep.miou_novel = _mean(novel)
    rep.miou_all = _mean(base + novel)
    return rep


def step_curve(reports) -> list[tuple[int, float]]:
    """Ordered (step, miou_all) pairs for per-increment tracking."""
    if not reports:
        raise ValueError("step_curve needs at least one report")
    return [(r.step, r.miou_all) for r in reports]


def _fmt(x) -> str:
    return "" if x is None else format(x, ".17g")


def write_summary_csv(path, reports) -> None:
    lines = ["step,miou_base,miou_novel,miou_all"]
    for r in reports:
        lines.append(f"{r.step},{_fmt(r.miou_base)},{_fmt(r.miou_novel)},{_fmt(r.miou_all)}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def write_per_class_csv(path, reports) -> None:
    lines = ["step,class_id,iou"]
    for r in reports:
        for k in sorted(r.per_class):
            lines.append(f"{r.step},{k},{_fmt(r.per_class[k])}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def write_curve_csv(path, reports) -> None:
    lines = ["step,miou_all"]
    for step, val in step_curve(reports):
        lines.append(f"{step},{_fmt(val)}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
