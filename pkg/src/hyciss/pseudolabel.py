"""Pseudo-labeling of background pixels from the frozen previous-step model.

The hierarchical rule walks the old taxonomy from the root and keeps
descending while the best child's descendant-max score clears that level's
threshold; the deepest accepted node (possibly internal) becomes the label.
The uniform rule is the flat baseline: best leaf with raw sigmoid score
above 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import BACKGROUND, IGNORE
from .errors import ThresholdDepthMismatchError
from .hierhead import _descend
from .losses import desc_max_scores
from .taxonomy import Taxonomy

# Per-level confidence thresholds (levels 0, 1, 2).
DEFAULT_THRESHOLDS = (0.6, 0.6, 0.4)


@dataclass(frozen=True)
class LevelThresholds:
    s_levels: tuple = DEFAULT_THRESHOLDS

    def __post_init__(self):
        if not all(0.0 < s < 1.0 for s in self.s_levels):
            raise ValueError("thresholds must lie in the open interval (0, 1)")

    def __len__(self):
        return len(self.s_levels)

    def __getitem__(self, i):
        return self.s_levels[i]


def pseudo_label(old_scores: np.ndarray, train_label: np.ndarray,
                 tax_old: Taxonomy, th: LevelThresholds):
    """Relabel background pixels using the old model's score volume.

    Returns (labels, ignore_mask). Current-task labels always win; a pixel
    whose best level-0 score fails s_0 stays background. Labels may be
    internal nodes; their strict descendants are masked out downstream by
    build_targets.
    """
    if tax_old.num_levels > len(th):
        raise ThresholdDepthMismatchError(
            f"taxonomy has {tax_old.num_levels} levels, only {len(th)} thresholds"
        )
    train_label = np.asarray(train_label)
    dm = desc_max_scores(np.asarray(old_scores, dtype=np.float64), tax_old)
    proposal = _descend(dm, tax_old, accept=lambda level, best: best > th[level])
    out = train_label.astype(np.int64)
    bg = train_label == BACKGROUND
    out[bg] = proposal[bg]
    return out, out == IGNORE


def uniform_pseudo_label(old_scores: np.ndarray, train_label: np.ndarray,
                         tax_old: Taxonomy) -> np.ndarray:
    """Baseline rule: adopt the best leaf whose raw sigmoid score exceeds
    0.5 (ties to the lowest id), else keep background."""
    train_label = np.asarray(train_label)
    scores = np.asarray(old_scores, dtype=np.float64)
    leaf = scores[..., tax_old.leaf_channels]
    best = leaf.argmax(axis=-1)
    bestval = np.take_along_axis(leaf, best[..., None], axis=-1)[..., 0]
    ids = np.array(tax_old.leaves)[best]
    proposal = np.where(bestval > 0.5, ids, BACKGROUND)
    out = train_label.astype(np.int64)
    bg = train_label == BACKGROUND
    out[bg] = proposal[bg]
    return out
