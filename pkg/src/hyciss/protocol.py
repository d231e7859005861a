"""Task scheduling for class-incremental training.

A schedule lists, per step t, the class ids introduced at that step over a
fixed final taxonomy. Images are shared across steps ("overlapped"): at step
t only C^t classes are labeled and every other pixel is background, which is
the background shift the trainer must survive. Ground-truth label maps always
carry final-taxonomy leaf ids; the shift coarsens them, never invents.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import BACKGROUND, IGNORE
from .errors import (
    BadParentError,
    CountMismatchError,
    ScheduleError,
    UnknownClassIdError,
)
from .taxonomy import Taxonomy, subtree


@dataclass(frozen=True)
class ScheduleStep:
    classes: tuple
    mode: str  # "base", "disjoint" or "refinement"


class TaskSchedule:
    """Validated ordered label-space increments over a final taxonomy."""

    def __init__(self, taxonomy: Taxonomy, steps, mode: str):
        self.taxonomy = taxonomy
        self.steps = tuple(steps)
        self.mode = mode
        self.name = _canonical_name(self.steps)
        self._tax_cache: dict[int, Taxonomy] = {}
        self._shift_cache: dict[int, np.ndarray] = {}
        self._eval_cache: dict[int, np.ndarray] = {}

    @property
    def num_steps(self) -> int:
        return len(self.steps)

    def classes_at(self, t: int) -> tuple:
        return self.steps[t - 1].classes

    def classes_through(self, t: int) -> tuple:
        out = []
        for s in self.steps[:t]:
            out.extend(s.classes)
        return tuple(out)

    def taxonomy_at(self, t: int) -> Taxonomy:
        """Sub-taxonomy active after step t: introduced ids plus ancestors."""
        if t not in self._tax_cache:
            self._tax_cache[t] = subtree(self.taxonomy, self.classes_through(t))
        return self._tax_cache[t]

    def _leaf_map(self, t: int, target_ids) -> np.ndarray:
        """LUT mapping final leaves to their unique ancestor-or-self in
        target_ids, else background."""
        lut = np.full(IGNORE + 1, -1, dtype=np.int64)
        lut[BACKGROUND] = BACKGROUND
        lut[IGNORE] = IGNORE
        target = set(target_ids)
        for leaf in self.taxonomy.leaves:
            hits = [u for u in self.taxonomy.ancestors[leaf] if u in target]
            if len(hits) > 1:
                raise ScheduleError(
                    f"leaf {leaf} has several ancestors in one label space: {hits}"
                )
            lut[leaf] = hits[0] if hits else BACKGROUND
        return lut

    def shift_lut(self, t: int) -> np.ndarray:
        if t not in self._shift_cache:
            self._shift_cache[t] = self._leaf_map(t, self.classes_at(t))
        return self._shift_cache[t]

    def eval_lut(self, t: int) -> np.ndarray:
        """Maps final leaves to the step-t label space (active leaves)."""
        if t not in self._eval_cache:
            self._eval_cache[t] = self._leaf_map(t, self.taxonomy_at(t).leaves)
        return self._eval_cache[t]


def _canonical_name(steps) -> str:
    counts = [len(s.classes) for s in steps]
    if len(counts) == 1:
        return f"{counts[0]} (offline)"
    incr = counts[1:]
    if len(set(incr)) == 1:
        return f"{counts[0]}-{incr[0]} ({len(incr)} tasks)"
    return "-".join(str(c) for c in counts)


def build_schedule(config, taxonomy: Taxonomy) -> TaskSchedule:
    """Validate a schedule document against the final taxonomy.

    config: {"mode": "disjoint"|"refinement",
             "steps": [{"classes": [ids], "parents": {child: parent}}, ...]}

    Every final leaf must be introduced exactly once; disjoint increments
    attach at the root, refinement increments under classes of earlier steps.
    """
    if isinstance(config, (str, Path)):
        with open(config) as f:
            config = json.load(f)
    mode = config.get("mode")
    if mode not in ("disjoint", "refinement"):
        raise ScheduleError(f"schedule mode must be disjoint or refinement, got {mode!r}")
    raw_steps = config.get("steps") or []
    if not raw_steps:
        raise ScheduleError("schedule has no steps")

    seen: set[int] = set()
    steps = []
    for i, rec in enumerate(raw_steps):
        classes = tuple(int(x) for x in rec.get("classes", ()))
        if not classes and i == 0:
            raise ScheduleError("the base step must introduce at least one class")
        for cid in classes:
            if cid not in taxonomy.nodes or cid == taxonomy.root:
                raise UnknownClassIdError(f"step {i + 1}: unknown class id {cid}")
            if cid in seen:
                raise CountMismatchError(f"class id {cid} introduced twice")
        declared = {int(k): int(v) for k, v in (rec.get("parents") or {}).items()}
        for child, parent in declared.items():
            if taxonomy.nodes.get(child, (None, None))[1] != parent:
                raise BadParentError(
                    f"step {i + 1}: declared parent {parent} of {child} "
                    "does not match the taxonomy"
                )
        if i > 0:
            for cid in classes:
                parent = taxonomy.parent_of(cid)
                if mode == "disjoint" and parent != taxonomy.root:
                    raise BadParentError(
                        f"disjoint step {i + 1}: class {cid} does not attach at root"
                    )
                if mode == "refinement" and parent not in seen:
                    raise BadParentError(
                        f"refinement step {i + 1}: parent {parent} of {cid} "
                        "was not introduced earlier"
                    )
        seen.update(classes)
        steps.append(ScheduleStep(classes, "base" if i == 0 else mode))

    uncovered = set(taxonomy.leaves) - seen
    if uncovered:
        raise CountMismatchError(
            f"final leaves never introduced by any step: {sorted(uncovered)}"
        )
    return TaskSchedule(taxonomy, steps, mode)


def apply_background_shift(full_labels: np.ndarray, t: int,
                           schedule: TaskSchedule) -> np.ndarray:
    """Step-visible label map: pixels of C^t classes keep (or coarsen/split
    to) their step-t id, everything else becomes background."""
    full_labels = np.asarray(full_labels)
    lut = schedule.shift_lut(t)
    out = lut[full_labels]
    if (out < 0).any():
        bad = np.unique(full_labels[out < 0])
        raise UnknownClassIdError(f"full labels contain non-leaf ids: {bad.tolist()}")
    return out


def eval_space_labels(full_labels: np.ndarray, t: int,
                      schedule: TaskSchedule) -> np.ndarray:
    """Ground truth coarsened to the step-t active leaf set (for evaluation)."""
    full_labels = np.asarray(full_labels)
    lut = schedule.eval_lut(t)
    out = lut[full_labels]
    if (out < 0).any():
        bad = np.unique(full_labels[out < 0])
        raise UnknownClassIdError(f"full labels contain non-leaf ids: {bad.tolist()}")
    return out


def metric_partition(schedule: TaskSchedule, upto: int | None = None):
    """(base, novel) class-id partition over the active leaves after step
    `upto` (default: the final step). Classes refined away are not leaves and
    therefore drop out of evaluation."""
    t = schedule.num_steps if upto is None else upto
    leaves = set(schedule.taxonomy_at(t).leaves)
    base = tuple(sorted(leaves & set(schedule.classes_at(1))))
    novel = tuple(sorted(leaves - set(schedule.classes_at(1))))
    return base, novel


def assert_step_visible(labels: np.ndarray, t: int, schedule: TaskSchedule) -> None:
    """Replay-free audit hook: a training batch at step t may only carry
    current-task ids, background, and ignore."""
    labels = np.asarray(labels)
    allowed = np.zeros(IGNORE + 1, dtype=bool)
    allowed[BACKGROUND] = True
    allowed[IGNORE] = True
    for cid in schedule.classes_at(t):
        allowed[cid] = True
    if not allowed[labels].all():
        bad = np.unique(labels[~allowed[labels]])
        raise AssertionError(
            f"replay-free violation at step {t}: labels {bad.tolist()} "
            "are outside the current task"
        )
