"""Hierarchical composite training loss.

Three terms over per-node sigmoid scores s (channel layout from the
taxonomy): a binary term on ancestor-min / descendant-max aggregates
(weight alpha), a dense per-node soft Dice on descendant-max (beta), and a
cross-entropy over root-children descendant-max values (gamma). Pixels
labeled IGNORE are excluded from every term; pixels labeled with an internal
node supervise its ancestor path and leave its strict descendants
unsupervised.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import IGNORE, gradengine as ge
from .errors import NoLabeledPixelsError
from .taxonomy import Taxonomy, build_targets

# Scores are clamped to [LOG_EPS, 1 - LOG_EPS] inside logarithms.
LOG_EPS = 1e-7


@dataclass
class LossWeights:
    alpha: float = 5.0
    beta: float = 0.7
    gamma: float = 0.3
    dice_smooth: float = 1.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0 or self.dice_smooth < 0:
            raise ValueError("loss weights must be non-negative")


def aggregate(scores, tax: Taxonomy):
    """Per node v: (min over ancestors-or-self, max over descendants-or-self).

    Accepts a Tensor (recorded on the active tape, subgradients routed to the
    achieving element, lowest node id on ties) or a plain array.
    """
    if isinstance(scores, ge.Tensor):
        return (
            ge.tree_min(scores, tax.anc_plan),
            ge.tree_max(scores, tax.desc_plan),
        )
    scores = np.asarray(scores, dtype=np.float64)
    return (
        ge.tree_reduce_values(scores, tax.anc_plan, minimize=True)[0],
        ge.tree_reduce_values(scores, tax.desc_plan, minimize=False)[0],
    )


def desc_max_scores(scores: np.ndarray, tax: Taxonomy) -> np.ndarray:
    """Descendant-max aggregate for plain arrays (decode / pseudo-labeling)."""
    return ge.tree_reduce_values(
        np.asarray(scores, dtype=np.float64), tax.desc_plan, minimize=False
    )[0]


def hier_bce(anc_min, desc_max, targets: np.ndarray, node_mask: np.ndarray | None = None):
    """Mean over supervised pixels of
    sum_v [ -l_v log(anc_min_v) - (1 - l_v) log(1 - desc_max_v) ]."""
    targets = np.asarray(targets, dtype=np.float64)
    if node_mask is None:
        node_mask = np.ones_like(targets)
    pixel_in = node_mask.any(axis=-1)
    n_pix = int(pixel_in.sum())
    if n_pix == 0:
        return ge.Tensor(0.0)
    am = ge.clip(anc_min, LOG_EPS, 1.0 - LOG_EPS)
    dm = ge.clip(desc_max, LOG_EPS, 1.0 - LOG_EPS)
    w_pos = targets * node_mask
    w_neg = (1.0 - targets) * node_mask
    s = ge.add(
        ge.total(ge.mul(ge.log(am), w_pos)),
        ge.total(ge.mul(ge.log(ge.sub(1.0, dm)), w_neg)),
    )
    return ge.mul(s, -1.0 / n_pix)


def hier_dice(desc_max, targets: np.ndarray, node_mask: np.ndarray | None = None,
              smooth: float = 1.0):
    """Mean over nodes of (1 - D_v) with the soft Dice
    D_v = (2 sum_p p l + smooth) / (sum_p p^2 + sum_p l^2 + smooth) over the
    supervised pixel field of each node."""
    targets = np.asarray(targets, dtype=np.float64)
    if node_mask is None:
        node_mask = np.ones_like(targets)
    axes = tuple(range(targets.ndim - 1))
    inter = ge.total(ge.mul(desc_max, targets * node_mask), axis=axes)
    p2 = ge.total(ge.mul(ge.mul(desc_max, desc_max), node_mask), axis=axes)
    l2 = (targets * targets * node_mask).sum(axis=axes)
    d = ge.div(ge.add(ge.mul(inter, 2.0), smooth), ge.add(ge.add(p2, l2), smooth))
    return ge.mean(ge.sub(1.0, d))


def hier_ce(desc_max, labels: np.ndarray, tax: Taxonomy):
    """Per-pixel softmax cross-entropy over root-children descendant-max
    values against the label's root-child ancestor; background and ignore
    pixels are excluded."""
    labels = np.asarray(labels)
    rc_chan = np.array([tax.chan[u] for u in tax.root_children], dtype=np.intp)
    cls = tax.rootchild_lut[labels]
    rows = np.flatnonzero(cls.ravel() >= 0)
    if rows.size == 0:
        raise NoLabeledPixelsError("no labeled pixels for the cross-entropy term")
    sel = ge.gather(desc_max, rc_chan)
    lsm = ge.log_softmax(ge.reshape(sel, (-1, rc_chan.size)))
    picked = ge.select_rows(lsm, rows, cls.ravel()[rows])
    return ge.neg(ge.mean(picked))


def topics_loss(scores, labels: np.ndarray, tax: Taxonomy, w: LossWeights):
    """alpha * hier_bce + beta * hier_dice + gamma * hier_ce.

    The cross-entropy term contributes zero when the (mini-)batch holds no
    labeled pixel, so all-background crops remain trainable.
    """
    labels = np.asarray(labels)
    targets, node_mask = build_targets(tax, labels)
    anc_min, desc_max = aggregate(scores, tax)
    terms = []
    if w.alpha != 0.0:
        terms.append(ge.mul(hier_bce(anc_min, desc_max, targets, node_mask), w.alpha))
    if w.beta != 0.0:
        terms.append(
            ge.mul(hier_dice(desc_max, targets, node_mask, w.dice_smooth), w.beta)
        )
    if w.gamma != 0.0 and (tax.rootchild_lut[labels] >= 0).any():
        terms.append(ge.mul(hier_ce(desc_max, labels, tax), w.gamma))
    if not terms:
        return ge.Tensor(0.0)
    out = terms[0]
    for t in terms[1:]:
        out = ge.add(out, t)
    return out


def flat_baseline_loss(scores, labels: np.ndarray, tax: Taxonomy,
                       alpha: float = 1.0, gamma: float = 1.0):
    """Plain fine-tuning loss that ignores the hierarchy: per-leaf binary
    cross-entropy (background pixels count as negatives for every leaf) plus
    softmax cross-entropy over leaf scores on labeled pixels."""
    labels = np.asarray(labels)
    leaf_ids = np.array(tax.leaves)
    onehot = np.zeros((IGNORE + 1, leaf_ids.size))
    onehot[leaf_ids, np.arange(leaf_ids.size)] = 1.0
    leaf_index = np.full(IGNORE + 1, -1, dtype=np.intp)
    leaf_index[leaf_ids] = np.arange(leaf_ids.size)

    tgt = onehot[labels]
    included = labels != IGNORE
    n_pix = int(included.sum())
    if n_pix == 0:
        return ge.Tensor(0.0)
    sel = ge.clip(ge.gather(scores, tax.leaf_channels), LOG_EPS, 1.0 - LOG_EPS)
    w_in = included[..., None].astype(np.float64)
    bce = ge.mul(
        ge.add(
            ge.total(ge.mul(ge.log(sel), tgt * w_in)),
            ge.total(ge.mul(ge.log(ge.sub(1.0, sel)), (1.0 - tgt) * w_in)),
        ),
        -alpha / n_pix,
    )
    cls = leaf_index[labels]
    rows = np.flatnonzero(cls.ravel() >= 0)
    if gamma == 0.0 or rows.size == 0:
        return bce
    lsm = ge.log_softmax(ge.reshape(sel, (-1, leaf_ids.size)))
    ce = ge.neg(ge.mean(ge.select_rows(lsm, rows, cls.ravel()[rows])))
    return ge.add(bce, ge.mul(ce, gamma))
