"""Replay-free class-incremental semantic segmentation with hyperbolic
class hyperplanes, trained and evaluated on procedurally generated scenes."""

__version__ = "0.1.0"

BACKGROUND = 0  # reserved label id for unlabeled / background pixels
IGNORE = 255  # reserved label id for pixels excluded from every loss term
