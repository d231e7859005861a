"""Rooted class tree with ancestor/descendant closures and per-step growth.

Node ids are dense positive integers assigned append-only across increments;
id 0 is reserved for the virtual background label and 255 for ignore pixels,
neither of which is a tree node. The root is a structural node carrying no
hyperplane and no score channel; scored nodes ("classes" in the wide sense,
internal groups included) are every node except the root.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import BACKGROUND, IGNORE
from .errors import (
    CycleDetectedError,
    DuplicateNameError,
    MultipleRootsError,
    OrphanNodeError,
    TaxonomyError,
    UnknownNodeError,
    UnknownParentError,
)


class Taxonomy:
    """Immutable class tree; derived closures are computed eagerly."""

    def __init__(self, nodes):
        """nodes: iterable of (id, name, parent_id or None)."""
        self.nodes = {}
        self.names = {}
        for nid, name, parent in nodes:
            nid = int(nid)
            if nid in self.nodes:
                raise DuplicateNameError(f"duplicate node id {nid}")
            if nid <= BACKGROUND or nid >= IGNORE:
                raise TaxonomyError(f"node id {nid} outside the valid range 1..254")
            if name in self.names:
                raise DuplicateNameError(f"duplicate node name {name!r}")
            self.nodes[nid] = (name, None if parent is None else int(parent))
            self.names[name] = nid

        roots = [nid for nid, (_, p) in self.nodes.items() if p is None]
        if len(roots) != 1:
            raise MultipleRootsError(f"expected exactly one root, found {len(roots)}")
        self.root = roots[0]

        self.children: dict[int, tuple[int, ...]] = {nid: () for nid in self.nodes}
        for nid, (_, p) in self.nodes.items():
            if p is None:
                continue
            if p not in self.nodes:
                raise OrphanNodeError(f"node {nid} references missing parent {p}")
            self.children[p] = self.children[p] + (nid,)
        self.children = {k: tuple(sorted(v)) for k, v in self.children.items()}

        # Depth-first walk from the root; unreachable nodes imply a cycle.
        self.depth: dict[int, int] = {self.root: -1}
        stack = [self.root]
        order = []
        while stack:
            nid = stack.pop()
            order.append(nid)
            for ch in self.children[nid]:
                self.depth[ch] = self.depth[nid] + 1
                stack.append(ch)
        if len(order) != len(self.nodes):
            raise CycleDetectedError("taxonomy graph contains a cycle")

        # ancestor-or-self sets exclude the structural root (the root carries
        # no score channel); descendant-or-self sets are defined for all nodes
        self.ancestors: dict[int, tuple[int, ...]] = {}
        for nid in order:  # parents precede children in the walk
            _, p = self.nodes[nid]
            if p is None:
                self.ancestors[nid] = ()
            else:
                self.ancestors[nid] = tuple(sorted(self.ancestors[p] + (nid,)))
        desc: dict[int, set] = {nid: {nid} for nid in self.nodes}
        for nid in reversed(order):
            _, p = self.nodes[nid]
            if p is not None:
                desc[p] |= desc[nid]
        self.descendants = {nid: tuple(sorted(s)) for nid, s in desc.items()}

        self.leaves = tuple(
            sorted(nid for nid in self.nodes if nid != self.root and not self.children[nid])
        )
        # Scored nodes and their channel order in every score volume.
        self.class_ids = tuple(sorted(nid for nid in self.nodes if nid != self.root))
        self.chan = {nid: i for i, nid in enumerate(self.class_ids)}
        self.num_levels = 1 + max(
            (self.depth[nid] for nid in self.class_ids), default=-1
        )
        self._build_indices()
        self._build_luts()

    # -- derived index structures ------------------------------------------

    def _build_indices(self):
        # Fold plans for the exact min/max tree reductions: each (dst, src)
        # channel pair merges src's running extremum into dst. Descendant-max
        # folds children into parents deepest-first; ancestor-min folds each
        # parent's running minimum into its children top-down.
        desc_plan = []
        for v in sorted(self.class_ids, key=lambda n: -self.depth[n]):
            for ch in self.children[v]:
                desc_plan.append((self.chan[v], self.chan[ch]))
        anc_plan = []
        for v in sorted(self.class_ids, key=lambda n: self.depth[n]):
            parent = self.nodes[v][1]
            if parent is not None and parent != self.root:
                anc_plan.append((self.chan[v], self.chan[parent]))
        self.desc_plan = np.array(desc_plan, dtype=np.intp).reshape(-1, 2)
        self.anc_plan = np.array(anc_plan, dtype=np.intp).reshape(-1, 2)
        self.root_children = self.children[self.root]
        self.leaf_channels = np.array([self.chan[u] for u in self.leaves], dtype=np.intp)
        # Child tables indexed by node id, for the root-to-leaf descents.
        max_id = max(self.nodes)
        kmax = max((len(c) for c in self.children.values()), default=0) or 1
        self.child_chan_lut = np.full((max_id + 1, kmax), -1, dtype=np.intp)
        self.child_id_lut = np.zeros((max_id + 1, kmax), dtype=np.int64)
        self.child_count_lut = np.zeros(max_id + 1, dtype=np.int64)
        for nid, chs in self.children.items():
            self.child_count_lut[nid] = len(chs)
            for j, ch in enumerate(chs):
                self.child_chan_lut[nid, j] = self.chan[ch]
                self.child_id_lut[nid, j] = ch

    def _build_luts(self):
        v = len(self.class_ids)
        self.valid_label = np.zeros(IGNORE + 1, dtype=bool)
        self.valid_label[BACKGROUND] = True
        self.valid_label[IGNORE] = True
        self.target_lut = np.zeros((IGNORE + 1, v), dtype=np.float64)
        self.mask_lut = np.zeros((IGNORE + 1, v), dtype=np.float64)
        self.mask_lut[BACKGROUND] = 1.0
        for nid in self.class_ids:
            self.valid_label[nid] = True
            row = self.target_lut[nid]
            for u in self.ancestors[nid]:
                row[self.chan[u]] = 1.0
            mrow = np.ones(v)
            for u in self.descendants[nid]:
                if u != nid:
                    mrow[self.chan[u]] = 0.0  # strict descendants are not supervised
            self.mask_lut[nid] = mrow
        # LUT from any node id to the channel of its level-0 (root-child) ancestor.
        self.rootchild_lut = np.full(IGNORE + 1, -1, dtype=np.intp)
        rc_pos = {nid: i for i, nid in enumerate(self.root_children)}
        for nid in self.class_ids:
            top = min(
                (u for u in self.ancestors[nid] if u in rc_pos),
                default=None,
            )
            if top is not None:
                self.rootchild_lut[nid] = rc_pos[top]

    # -- queries -------------------------------------------------------------

    def name_of(self, nid: int) -> str:
        return self.nodes[nid][0]

    def parent_of(self, nid: int):
        return self.nodes[nid][1]

    def is_leaf(self, nid: int) -> bool:
        return nid in self.nodes and nid != self.root and not self.children[nid]

    def to_doc(self) -> dict:
        return {
            "nodes": [
                {"id": nid, "name": name, "parent": parent}
                for nid, (name, parent) in sorted(self.nodes.items())
            ]
        }


def load_taxonomy(source) -> Taxonomy:
    """Build a validated Taxonomy from a JSON document, path, or dict.

    The full document must use dense ids 1..n; grown sub-taxonomies keep the
    original ids and may have gaps.
    """
    if isinstance(source, (str, Path)):
        with open(source) as f:
            doc = json.load(f)
    else:
        doc = source
    if not isinstance(doc, dict) or "nodes" not in doc:
        raise TaxonomyError("taxonomy document must be an object with a 'nodes' array")
    recs = doc["nodes"]
    tax = Taxonomy((r["id"], r["name"], r.get("parent")) for r in recs)
    ids = sorted(tax.nodes)
    if ids != list(range(1, len(ids) + 1)):
        raise TaxonomyError("taxonomy document ids must be dense 1..n")
    return tax


def grow(tax: Taxonomy, increment) -> Taxonomy:
    """Append nodes (id, name, parent_id) to an existing tree.

    Existing node ids and closures are preserved (append-only); a refined
    parent simply stops being a leaf in the returned taxonomy.
    """
    existing = [(nid, name, parent) for nid, (name, parent) in sorted(tax.nodes.items())]
    new_ids = {nid for nid, _, _ in increment}
    for nid, name, parent in increment:
        if parent not in tax.nodes and parent not in new_ids:
            raise UnknownParentError(f"new node {nid} references unknown parent {parent}")
    return Taxonomy(existing + list(increment))


def subtree(tax: Taxonomy, keep_ids) -> Taxonomy:
    """Induced sub-taxonomy: the given nodes plus all their ancestors."""
    keep = set()
    for nid in keep_ids:
        if nid not in tax.nodes:
            raise UnknownNodeError(f"unknown node id {nid}")
        keep.update(tax.ancestors[nid])
    keep.add(tax.root)
    return Taxonomy(
        (nid, name, parent)
        for nid, (name, parent) in sorted(tax.nodes.items())
        if nid in keep
    )


def node_targets(tax: Taxonomy, label: int) -> np.ndarray:
    """Binary target vector over score channels: 1 on ancestors-or-self of
    the label, all zeros for the background label."""
    if label == BACKGROUND:
        return np.zeros(len(tax.class_ids), dtype=np.float64)
    if label not in tax.nodes or label == tax.root:
        raise UnknownNodeError(f"unknown label id {label}")
    return self_targets_row(tax, label)


def self_targets_row(tax: Taxonomy, label: int) -> np.ndarray:
    return tax.target_lut[label].copy()


def build_targets(tax: Taxonomy, labels: np.ndarray):
    """Vectorized targets for a label map.

    Returns (l, mask): per pixel per channel target in {0,1} and supervision
    mask. Ignore pixels get an all-zero mask row; pixels labeled with an
    internal node supervise its ancestor closure and mask out its strict
    descendants.
    """
    labels = np.asarray(labels)
    if not tax.valid_label[labels].all():
        bad = labels[~tax.valid_label[labels]]
        raise UnknownNodeError(f"label map contains unknown ids, e.g. {int(bad.flat[0])}")
    return tax.target_lut[labels], tax.mask_lut[labels]
