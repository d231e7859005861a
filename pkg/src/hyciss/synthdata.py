"""Procedural generator of surgical-scene stand-ins.

Each image is a textured background with parameterized shapes painted in
random z-order; the label map carries exact final-taxonomy leaf ids. Sibling
leaves share a color mean and differ only in shape family, which makes the
hierarchy visually meaningful; ribbon families are an order of magnitude
rarer in pixels than blob families, which keeps the class balance skewed the
way the Dice term is meant to handle.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .taxonomy import Taxonomy


@dataclass(frozen=True)
class ShapeFamily:
    leaf: int
    kind: str  # ellipse | rect | ribbon
    color: tuple
    size: tuple  # (lo, hi) primary half-extent / ribbon length, pixels
    count: tuple  # (lo, hi) instances per image, inclusive
    aspect: float = 0.6
    jitter: float = 0.03


@dataclass(frozen=True)
class SceneSpec:
    size: int
    families: tuple
    distractors: tuple = ()  # drawn like shapes but labeled background
    bg_color: tuple = (0.10, 0.10, 0.14)
    bg_noise: float = 0.03
    pixel_noise: float = 0.02


def spec_to_doc(spec: SceneSpec) -> dict:
    return asdict(spec)


def spec_from_doc(doc: dict) -> SceneSpec:
    try:
        def fam(f):
            return ShapeFamily(
                leaf=int(f["leaf"]),
                kind=f["kind"],
                color=tuple(f["color"]),
                size=tuple(f["size"]),
                count=tuple(f["count"]),
                aspect=float(f.get("aspect", 0.6)),
                jitter=float(f.get("jitter", 0.03)),
            )

        return SceneSpec(
            size=int(doc["size"]),
            families=tuple(fam(f) for f in doc["families"]),
            distractors=tuple(fam(f) for f in doc.get("distractors", ())),
            bg_color=tuple(doc.get("bg_color", (0.10, 0.10, 0.14))),
            bg_noise=float(doc.get("bg_noise", 0.03)),
            pixel_noise=float(doc.get("pixel_noise", 0.02)),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"malformed scene spec: {e}") from e


def validate_scene(spec: SceneSpec, tax: Taxonomy) -> None:
    covered = {f.leaf for f in spec.families}
    missing = set(tax.leaves) - covered
    if missing:
        raise ConfigError(f"scene spec misses leaf families for ids {sorted(missing)}")
    bad = [f.leaf for f in spec.distractors if f.leaf != 0]
    if bad:
        raise ConfigError(f"distractor families must carry leaf id 0, got {bad}")


def _shape_mask(rng, kind, size_range, aspect, hw):
    h, w = hw
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy = rng.uniform(2.0, h - 2.0)
    cx = rng.uniform(2.0, w - 2.0)
    a = rng.uniform(*size_range)
    theta = rng.uniform(0.0, np.pi)
    ct, st = np.cos(theta), np.sin(theta)
    u = ct * (xx - cx) + st * (yy - cy)
    v = -st * (xx - cx) + ct * (yy - cy)
    if kind == "ellipse":
        b = a * aspect * rng.uniform(0.7, 1.3)
        return (u / a) ** 2 + (v / max(b, 0.8)) ** 2 <= 1.0
    if kind == "rect":
        b = max(a * aspect * rng.uniform(0.7, 1.3), 0.7)
        return (np.abs(u) <= a) & (np.abs(v) <= b)
    if kind == "ribbon":
        # thin band along a quadratic Bezier curve of roughly length `a`
        p0 = np.array([cy, cx])
        direction = rng.normal(size=2)
        direction /= np.linalg.norm(direction)
        p2 = p0 + direction * a
        p1 = (p0 + p2) / 2 + rng.normal(scale=a / 3.0, size=2)
        t = np.linspace(0.0, 1.0, 48)[:, None]
        pts = (1 - t) ** 2 * p0 + 2 * t * (1 - t) * p1 + t**2 * p2
        d2 = (yy[..., None] - pts[:, 0]) ** 2 + (xx[..., None] - pts[:, 1]) ** 2
        width = 0.9
        return d2.min(axis=-1) <= width**2
    raise ConfigError(f"unknown shape kind {kind!r}")


def _render(spec: SceneSpec, rng: np.random.Generator):
    h = w = spec.size
    img = np.empty((h, w, 3))
    img[:] = spec.bg_color
    img += rng.normal(scale=spec.bg_noise, size=(h, w, 3))
    labels = np.zeros((h, w), dtype=np.int64)
    instances = []
    for fam in spec.families + spec.distractors:
        k = int(rng.integers(fam.count[0], fam.count[1] + 1))
        instances.extend([fam] * k)
    order = rng.permutation(len(instances))
    for i in order:
        fam = instances[i]
        lid = fam.leaf
        mask = _shape_mask(rng, fam.kind, fam.size, fam.aspect, (h, w))
        if not mask.any():
            continue
        color = np.clip(np.array(fam.color) + rng.normal(scale=fam.jitter, size=3), 0, 1)
        img[mask] = color
        labels[mask] = lid
    img += rng.normal(scale=spec.pixel_noise, size=img.shape)
    np.clip(img, 0.0, 1.0, out=img)
    # center to [-0.5, 0.5]: tanh backbones train poorly on all-positive input
    img -= 0.5
    return img, labels


def generate(spec: SceneSpec, n: int, seed: int):
    """Deterministic list of (image [H,W,3] float64, leaf label map [H,W])."""
    out = []
    for child in np.random.SeedSequence(seed).spawn(n):
        out.append(_render(spec, np.random.default_rng(child)))
    return out


# -- disk format ----------------------------------------------------------------


def save_dataset(out_dir, samples, spec: SceneSpec, seed: int) -> None:
    """Paired binary image/label files plus a manifest; the manifest is
    written last as the completion marker."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for i, (img, lab) in enumerate(samples):
        iname, lname = f"img_{i:05d}.npy", f"lab_{i:05d}.npy"
        np.save(out_dir / iname, img)
        np.save(out_dir / lname, lab.astype(np.uint8))
        files.append([iname, lname])
    manifest = {
        "n": len(samples),
        "seed": seed,
        "spec": spec_to_doc(spec),
        "files": files,
    }
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def load_dataset(dir_path):
    dir_path = Path(dir_path)
    with open(dir_path / "manifest.json") as f:
        manifest = json.load(f)
    samples = []
    for iname, lname in manifest["files"]:
        img = np.load(dir_path / iname)
        lab = np.load(dir_path / lname).astype(np.int64)
        samples.append((img, lab))
    return samples, manifest


# -- presets ---------------------------------------------------------------------


def _tax_doc(rows) -> dict:
    return {
        "nodes": [
            {"id": i, "name": name, "parent": parent}
            for i, name, parent in rows
        ]
    }


_DEEP12_TAX = _tax_doc(
    [
        (1, "scene", None),
        (2, "instrument", 1),
        (3, "tissue", 1),
        (4, "grasper", 2),
        (5, "probe", 2),
        (6, "organ", 3),
        (7, "membrane", 3),
        (8, "grasper-jaws", 4),
        (9, "grasper-shaft", 4),
        (10, "probe-tip", 5),
        (11, "probe-rod", 5),
        (12, "liver-lobe", 6),
        (13, "kidney-pole", 6),
        (14, "peritoneum", 7),
        (15, "omentum", 7),
        (16, "suture-thread", 1),
        (17, "clamp", 1),
        (18, "gauze", 1),
        (19, "needle", 1),
    ]
)

_RED = (0.82, 0.18, 0.20)
_CYAN = (0.20, 0.78, 0.84)
_OCHRE = (0.72, 0.52, 0.18)
_VIOLET = (0.52, 0.22, 0.72)
_YELLOW = (0.88, 0.88, 0.30)
_BLUE = (0.25, 0.32, 0.88)
_PINK = (0.92, 0.62, 0.80)
_GREEN = (0.18, 0.85, 0.35)

# Sibling pairs share a color mean and split into a compact blob versus a
# thin elongated structure, so the hierarchy groups what a pure color
# classifier confuses while staying learnable for a small receptive field.
_DEEP12_FAMILIES = (
    ShapeFamily(8, "ellipse", _RED, (4, 7), (0, 2)),
    ShapeFamily(9, "ribbon", _RED, (6, 12), (0, 2)),
    ShapeFamily(10, "ellipse", _CYAN, (4, 7), (0, 2)),
    ShapeFamily(11, "ribbon", _CYAN, (6, 12), (0, 2)),
    ShapeFamily(12, "ellipse", _OCHRE, (5, 9), (1, 2)),
    ShapeFamily(13, "rect", _OCHRE, (4, 7), (0, 2), aspect=0.15),
    ShapeFamily(14, "ellipse", _VIOLET, (5, 9), (1, 2)),
    ShapeFamily(15, "rect", _VIOLET, (4, 7), (0, 2), aspect=0.15),
    ShapeFamily(16, "ribbon", _YELLOW, (6, 12), (0, 2)),
    ShapeFamily(17, "rect", _BLUE, (3, 6), (0, 2), aspect=0.4),
    ShapeFamily(18, "ellipse", _PINK, (3, 6), (0, 2)),
    ShapeFamily(19, "ribbon", _GREEN, (4, 8), (0, 2)),
)

# Unlabeled clutter in washed-out class colors: background is diverse enough
# that a flat 0.5-threshold pseudo-labeler picks up false leaves.
_DISTRACTORS = (
    ShapeFamily(0, "ellipse", (0.46, 0.14, 0.17), (3, 6), (0, 1)),
    ShapeFamily(0, "rect", (0.15, 0.44, 0.49), (3, 6), (0, 1), aspect=0.5),
    ShapeFamily(0, "ellipse", (0.41, 0.31, 0.16), (3, 6), (0, 1)),
    ShapeFamily(0, "rect", (0.31, 0.16, 0.43), (3, 6), (0, 1), aspect=0.3),
)

_REFINE12_TAX = _tax_doc(
    [
        (1, "scene", None),
        (2, "grasper", 1),
        (3, "scissor", 1),
        (4, "organ", 1),
        (5, "membrane", 1),
        (6, "grasper-jaws", 2),
        (7, "grasper-shaft", 2),
        (8, "scissor-blade", 3),
        (9, "scissor-handle", 3),
        (10, "liver-lobe", 4),
        (11, "kidney-pole", 4),
        (12, "peritoneum", 5),
        (13, "omentum", 5),
        (14, "grasper-wrist", 2),
        (15, "scissor-hinge", 3),
        (16, "fat-pad", 4),
        (17, "vessel-wall", 5),
    ]
)

_REFINE12_FAMILIES = (
    ShapeFamily(6, "ellipse", _RED, (4, 7), (0, 2)),
    ShapeFamily(7, "rect", _RED, (4, 7), (0, 2), aspect=0.15),
    ShapeFamily(14, "ribbon", _RED, (6, 12), (0, 2)),
    ShapeFamily(8, "ellipse", _CYAN, (4, 7), (0, 2)),
    ShapeFamily(9, "rect", _CYAN, (4, 7), (0, 2), aspect=0.15),
    ShapeFamily(15, "ribbon", _CYAN, (6, 12), (0, 2)),
    ShapeFamily(10, "ellipse", _OCHRE, (5, 9), (1, 2)),
    ShapeFamily(11, "rect", _OCHRE, (4, 7), (0, 2), aspect=0.15),
    ShapeFamily(16, "ribbon", _OCHRE, (6, 12), (0, 2)),
    ShapeFamily(12, "ellipse", _VIOLET, (5, 9), (1, 2)),
    ShapeFamily(13, "rect", _VIOLET, (4, 7), (0, 2), aspect=0.15),
    ShapeFamily(17, "ribbon", _VIOLET, (6, 12), (0, 2)),
)


def _preset_docs():
    return {
        "endovis-like-12": {
            "taxonomy": _DEEP12_TAX,
            "schedule": {
                "mode": "disjoint",
                "steps": [
                    {"classes": [8, 9, 10, 11, 12, 13, 14, 15]},
                    {"classes": [16]},
                    {"classes": [17]},
                    {"classes": [18]},
                    {"classes": [19]},
                ],
            },
            "scene": SceneSpec(
                size=32, families=_DEEP12_FAMILIES, distractors=_DISTRACTORS
            ),
        },
        "refine-12": {
            "taxonomy": _REFINE12_TAX,
            "schedule": {
                "mode": "refinement",
                "steps": [
                    {"classes": [2, 3, 4, 5]},
                    {"classes": [6, 7]},
                    {"classes": [8, 9]},
                    {"classes": [10, 11]},
                    {"classes": [12, 13]},
                    {"classes": [14, 15, 16, 17]},
                ],
            },
            "scene": SceneSpec(
                size=32, families=_REFINE12_FAMILIES, distractors=_DISTRACTORS
            ),
        },
        "offline-12": {
            "taxonomy": _DEEP12_TAX,
            "schedule": {
                "mode": "disjoint",
                "steps": [{"classes": [8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19]}],
            },
            "scene": SceneSpec(
                size=32, families=_DEEP12_FAMILIES, distractors=_DISTRACTORS
            ),
        },
    }


PRESET_NAMES = tuple(_preset_docs())


def preset(name: str) -> dict:
    """Shipped benchmark: {'taxonomy': doc, 'schedule': doc, 'scene': SceneSpec}."""
    docs = _preset_docs()
    if name not in docs:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(docs)}")
    return docs[name]
