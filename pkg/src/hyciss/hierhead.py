"""Hyperbolic classification head: per-taxonomy-node hyperplanes in the ball.

Hyperplane offsets are parameterized in the tangent space at the origin and
mapped through expmap0 at use time, so plain gradient descent applies to
them. Channel k of every score volume corresponds to tax.class_ids[k].
"""

from __future__ import annotations

import numpy as np

from . import BACKGROUND, gradengine as ge
from .losses import desc_max_scores
from .taxonomy import Taxonomy

# Orientation rows are re-floored to this norm after every update.
ORIENT_FLOOR = 1e-12
# Offset tangent parameters are capped so the mapped offset stays at no more
# than this fraction of the ball radius; beyond it the logit enters its
# saturated boundary regime and gradient descent on the offsets turns
# unstable.
OFFSET_CAP_FRACTION = 0.9


class HyperbolicHead:
    """Offset/orientation parameter rows for every scored taxonomy node."""

    def __init__(self, tax: Taxonomy, feat_dim: int, curvature: float,
                 offsets: np.ndarray | None = None,
                 orientations: np.ndarray | None = None,
                 rng: np.random.Generator | None = None):
        self.tax = tax
        self.feat_dim = feat_dim
        self.curvature = float(curvature)
        v = len(tax.class_ids)
        if offsets is None:
            offsets = np.zeros((v, feat_dim))
        if orientations is None:
            rng = rng or np.random.default_rng(0)
            orientations = rng.normal(size=(v, feat_dim))
            orientations /= np.linalg.norm(orientations, axis=1, keepdims=True)
        self.offset_param = ge.parameter(offsets)
        self.orientation = ge.parameter(orientations)

    def parameters(self):
        return {"head.offset": self.offset_param, "head.orientation": self.orientation}

    def hyperplane(self, node_id: int):
        """(offset ball point, orientation) rows for one node."""
        k = self.tax.chan[node_id]
        from . import geometry

        off = geometry.expmap0(self.offset_param.value[k], self.curvature)
        return off, self.orientation.value[k].copy()

    def clamp_orientations(self) -> None:
        r = self.orientation.value
        n = np.linalg.norm(r, axis=1)
        dead = n < ORIENT_FLOOR
        if dead.any():
            for i in np.flatnonzero(dead):
                if n[i] == 0.0:
                    r[i, 0] = ORIENT_FLOOR
                else:
                    r[i] *= ORIENT_FLOOR / n[i]

    def clamp_offsets(self) -> None:
        cap = np.arctanh(OFFSET_CAP_FRACTION) / np.sqrt(self.curvature)
        o = self.offset_param.value
        n = np.linalg.norm(o, axis=1, keepdims=True)
        scale = np.where(n > cap, cap / np.maximum(n, 1e-30), 1.0)
        o *= scale


def head_forward(features, head: HyperbolicHead):
    """Per-pixel, per-node scores: sigmoid of the hyperplane logit of the
    feature vector mapped into the ball. Accepts [..., N] features and
    returns [..., V]; differentiable end to end."""
    c = head.curvature
    lead = features.shape[:-1]
    n = features.shape[-1]
    x = ge.project(ge.expmap0(features, c), c)
    offsets = ge.project(ge.expmap0(head.offset_param, c), c)
    logits = ge.batched_logits(
        ge.reshape(x, (-1, n)), offsets, head.orientation, c
    )
    scores = ge.sigmoid(logits)
    return ge.reshape(scores, lead + (len(head.tax.class_ids),))


def expand_head(head: HyperbolicHead, tax_new: Taxonomy, init_scale: float,
                rng: np.random.Generator) -> HyperbolicHead:
    """Grow the head to a larger taxonomy.

    Pre-existing rows are copied bit-for-bit. A refinement child starts at
    its parent's parameters plus Gaussian noise of scale init_scale; a new
    root child starts at zero offset with a random unit orientation.
    """
    v_new = len(tax_new.class_ids)
    offsets = np.zeros((v_new, head.feat_dim))
    orients = np.zeros((v_new, head.feat_dim))
    known_off = {nid: head.offset_param.value[k] for nid, k in head.tax.chan.items()}
    known_ori = {nid: head.orientation.value[k] for nid, k in head.tax.chan.items()}
    new_ids = sorted(set(tax_new.class_ids) - set(head.tax.class_ids))
    for nid in new_ids:
        parent = tax_new.parent_of(nid)
        if parent == tax_new.root:
            o = np.zeros(head.feat_dim)
            r = rng.normal(size=head.feat_dim)
            r /= np.linalg.norm(r)
        else:
            o = known_off[parent] + init_scale * rng.normal(size=head.feat_dim)
            r = known_ori[parent] + init_scale * rng.normal(size=head.feat_dim)
        known_off[nid] = o
        known_ori[nid] = r
    for nid, k in tax_new.chan.items():
        offsets[k] = known_off[nid]
        orients[k] = known_ori[nid]
    return HyperbolicHead(tax_new, head.feat_dim, head.curvature, offsets, orients)


def decode(scores: np.ndarray, tax: Taxonomy) -> np.ndarray:
    """Greedy root-to-leaf decoding of a score volume.

    At each node the child with the largest descendant-max score is taken;
    a pixel whose best root child scores below 0.5 is background. Ties go to
    the lowest node id.
    """
    scores = np.asarray(scores, dtype=np.float64)
    dm = desc_max_scores(scores, tax)
    return _descend(dm, tax, accept=lambda level, best: best >= 0.5 if level == 0 else None)


def decode_flat(scores: np.ndarray, tax: Taxonomy) -> np.ndarray:
    """Non-hierarchical decoding: best raw leaf score, background below 0.5."""
    scores = np.asarray(scores, dtype=np.float64)
    leaf = scores[..., tax.leaf_channels]
    best = leaf.argmax(axis=-1)
    bestval = np.take_along_axis(leaf, best[..., None], axis=-1)[..., 0]
    ids = np.array(tax.leaves)[best]
    return np.where(bestval >= 0.5, ids, BACKGROUND).astype(np.int64)


def _descend(dm: np.ndarray, tax: Taxonomy, accept) -> np.ndarray:
    """Shared root-to-leaf walk over a descendant-max volume.

    accept(level, bestval) returns a boolean mask of pixels allowed to take
    the best child at this level, or None for unconditional descent.
    """
    shape = dm.shape[:-1]
    cur = np.full(shape, tax.root, dtype=np.int64)
    alive = np.ones(shape, dtype=bool)
    for level in range(tax.num_levels):
        counts = tax.child_count_lut[cur]
        consider = alive & (counts > 0)
        if not consider.any():
            break
        chan = tax.child_chan_lut[cur]  # [..., K], -1 padded
        vals = np.take_along_axis(dm, np.maximum(chan, 0), axis=-1)
        vals = np.where(chan >= 0, vals, -np.inf)
        best = vals.argmax(axis=-1)
        bestval = np.take_along_axis(vals, best[..., None], axis=-1)[..., 0]
        best_id = tax.child_id_lut[cur, best]
        gate = accept(level, bestval)
        step = consider if gate is None else (consider & gate)
        cur = np.where(step, best_id, cur)
        alive = step
    return np.where(cur == tax.root, BACKGROUND, cur)
