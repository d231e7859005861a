"""Incremental training loop.

Each schedule step snapshots the previous model, grows the taxonomy and the
head, re-masks every image to the current label space (background shift),
optionally pseudo-labels background pixels with the frozen snapshot, and
optimizes the hierarchical loss with momentum SGD under a polynomial
learning-rate decay. The loop never touches ground truth outside the shift
and pseudo-labeling paths; an audit hook asserts that on every batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from . import BACKGROUND, IGNORE, gradengine as ge
from .errors import ConfigError
from .evaluation import ConfusionMatrix, MIoUReport, accumulate, report
from .hierhead import decode, decode_flat
from .losses import LossWeights, flat_baseline_loss, topics_loss
from .model import BackboneConfig, SegModel
from .protocol import (
    TaskSchedule,
    apply_background_shift,
    assert_step_visible,
    eval_space_labels,
    metric_partition,
)
from .pseudolabel import LevelThresholds, pseudo_label, uniform_pseudo_label

PL_MODES = ("hierarchical", "uniform", "none")


@dataclass
class TrainConfig:
    epochs: int = 60
    epochs_incr: int | None = None  # incremental steps; None = same as epochs
    base_lr: float = 0.03
    incr_lr: float = 0.01
    poly_power: float = 0.9
    momentum: float = 0.9
    batch_size: int = 8
    crop: int | None = 24
    flip: bool = True
    pl_mode: str = "hierarchical"
    naive: bool = False
    init_scale: float = 0.01
    clip_grad_norm: float | None = 10.0

    def __post_init__(self):
        if self.epochs < 1 or self.base_lr <= 0 or self.incr_lr <= 0:
            raise ConfigError("epochs must be >= 1 and learning rates positive")
        if self.epochs_incr is not None and self.epochs_incr < 1:
            raise ConfigError("epochs_incr must be >= 1")
        if self.pl_mode not in PL_MODES:
            raise ConfigError(f"pl_mode must be one of {PL_MODES}")


def poly_lr(iteration: int, max_iter: int, lr0: float, power: float = 0.9) -> float:
    """lr0 * (1 - iteration/max_iter)^power."""
    return lr0 * (1.0 - iteration / max_iter) ** power


def augment(image: np.ndarray, label: np.ndarray, rng: np.random.Generator,
            crop: int | None = None, flip: bool = True):
    """Horizontal flip with p=0.5 plus a crop window drawn uniformly among
    windows containing at least one labeled pixel (any window if none has)."""
    if flip and rng.random() < 0.5:
        image = image[:, ::-1]
        label = label[:, ::-1]
    if crop is None:
        return np.ascontiguousarray(image), np.ascontiguousarray(label)
    h, w = label.shape
    if crop > h or crop > w:
        raise ConfigError(f"crop {crop} exceeds image size {h}x{w}")
    fg = ((label != BACKGROUND) & (label != IGNORE)).astype(np.int64)
    s = np.zeros((h + 1, w + 1), dtype=np.int64)
    s[1:, 1:] = fg.cumsum(axis=0).cumsum(axis=1)
    nh, nw = h - crop + 1, w - crop + 1
    counts = (
        s[crop:, crop:] - s[:nh, crop:] - s[crop:, :nw] + s[:nh, :nw]
    )
    candidates = np.flatnonzero(counts.ravel() > 0)
    if candidates.size == 0:
        candidates = np.arange(nh * nw)
    pick = candidates[rng.integers(candidates.size)]
    i, j = divmod(int(pick), nw)
    return (
        np.ascontiguousarray(image[i : i + crop, j : j + crop]),
        np.ascontiguousarray(label[i : i + crop, j : j + crop]),
    )


class SGD:
    """Momentum SGD over a model's parameter dict; velocity is per step.

    clip_norm, when set, rescales the joint gradient to that global L2 norm
    before the momentum update; rare boundary-pixel batches otherwise produce
    spikes that momentum amplifies into divergence.
    """

    def __init__(self, params: dict, momentum: float = 0.9,
                 clip_norm: float | None = None):
        self.params = params
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = {k: np.zeros_like(p.value) for k, p in params.items()}

    def step(self, lr: float) -> None:
        scale = 1.0
        if self.clip_norm is not None:
            total = math.sqrt(
                sum(float((p.grad * p.grad).sum()) for p in self.params.values())
            )
            if total > self.clip_norm:
                scale = self.clip_norm / total
        for k, p in self.params.items():
            v = self.velocity[k]
            v *= self.momentum
            v += scale * p.grad
            p.value -= lr * v


def train_step(model: SegModel, schedule: TaskSchedule, t: int, train_samples,
               cfg: TrainConfig, weights: LossWeights,
               thresholds: LevelThresholds, seed: int, log_rows=None):
    """Run one schedule step in place; returns the per-epoch mean-loss curve."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7000 + t]))
    tax_t = schedule.taxonomy_at(t)
    old = None
    if t > 1:
        if cfg.pl_mode != "none" and not cfg.naive:
            old = model.snapshot()
        model.expand(tax_t, rng, cfg.init_scale)

    visible = [apply_background_shift(lab, t, schedule) for _, lab in train_samples]
    images = [img for img, _ in train_samples]
    n = len(train_samples)
    epochs = cfg.epochs if (t == 1 or cfg.epochs_incr is None) else cfg.epochs_incr
    batches_per_epoch = max(1, (n + cfg.batch_size - 1) // cfg.batch_size)
    max_iter = epochs * batches_per_epoch
    lr0 = cfg.base_lr if t == 1 else cfg.incr_lr
    opt = SGD(model.parameters(), cfg.momentum, cfg.clip_grad_norm)

    curve = []
    iteration = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        lr = lr0
        for b in range(0, n, cfg.batch_size):
            idx = order[b : b + cfg.batch_size]
            pair = [
                augment(images[i], visible[i], rng, cfg.crop, cfg.flip) for i in idx
            ]
            imgs = np.stack([p[0] for p in pair])
            labs = np.stack([p[1] for p in pair])
            assert_step_visible(labs, t, schedule)
            if old is not None:
                old_scores = old.score_volume(imgs).value
                if cfg.pl_mode == "hierarchical":
                    labs, _ = pseudo_label(old_scores, labs, old.taxonomy, thresholds)
                else:
                    labs = uniform_pseudo_label(old_scores, labs, old.taxonomy)
            lr = poly_lr(iteration, max_iter, lr0, cfg.poly_power)
            with ge.Tape() as tape:
                scores = model.score_volume(imgs)
                if cfg.naive:
                    loss = flat_baseline_loss(scores, labs, tax_t)
                else:
                    loss = topics_loss(scores, labs, tax_t, weights)
            model.zero_grads()
            tape.backward(loss)
            opt.step(lr)
            model.head.clamp_orientations()
            model.head.clamp_offsets()
            losses.append(float(loss.value))
            iteration += 1
        curve.append(float(np.mean(losses)))
        if log_rows is not None:
            log_rows.append((t, epoch + 1, curve[-1], lr))
    return curve


def evaluate_step(model: SegModel, schedule: TaskSchedule, t: int, val_samples,
                  naive: bool = False, chunk: int = 16) -> MIoUReport:
    """Post-step validation mIoU in the step-t label space."""
    n_ids = max(schedule.taxonomy.nodes) + 1
    cm = ConfusionMatrix(n_ids)
    tax_t = schedule.taxonomy_at(t)
    for b in range(0, len(val_samples), chunk):
        part = val_samples[b : b + chunk]
        imgs = np.stack([img for img, _ in part])
        gts = np.stack([eval_space_labels(lab, t, schedule) for _, lab in part])
        scores = model.score_volume(imgs).value
        pred = decode_flat(scores, tax_t) if naive else decode(scores, tax_t)
        accumulate(cm, pred, gts)
    return report(cm, metric_partition(schedule, upto=t), step=t)


def run_schedule(schedule: TaskSchedule, train_samples, val_samples,
                 cfg: TrainConfig, weights: LossWeights,
                 thresholds: LevelThresholds, curvature: float, seed: int,
                 backbone: BackboneConfig = BackboneConfig(),
                 steps_limit: int | None = None, out_dir=None, progress=None):
    """Train all schedule steps in order.

    Returns (model, step reports, train-log rows). When out_dir is given,
    per-step checkpoints are written there as step_<t>.npz.
    """
    n_steps = schedule.num_steps if steps_limit is None else min(
        steps_limit, schedule.num_steps
    )
    model = SegModel(
        schedule.taxonomy_at(1), backbone, curvature,
        seed=int(np.random.SeedSequence([seed, 11]).generate_state(1)[0]),
    )
    reports = []
    log_rows: list = []
    # single-threaded BLAS: faster at this problem size and keeps gradient
    # reductions bit-reproducible across runs
    with threadpool_limits(limits=1, user_api="blas"):
        for t in range(1, n_steps + 1):
            train_step(model, schedule, t, train_samples, cfg, weights,
                       thresholds, seed, log_rows)
            rep = evaluate_step(model, schedule, t, val_samples, naive=cfg.naive)
            reports.append(rep)
            if out_dir is not None:
                model.save(f"{out_dir}/step_{t}.npz")
            if progress is not None:
                progress(t, rep)
    return model, reports, log_rows


def write_train_log(path, rows) -> None:
    lines = ["step,epoch,loss,lr"]
    for t, epoch, loss, lr in rows:
        lines.append(f"{t},{epoch},{loss:.17g},{lr:.17g}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
