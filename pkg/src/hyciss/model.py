"""Desk-scale segmentation model: a small convolutional encoder producing
per-pixel features, composed with the hyperbolic head.

The backbone keeps the input's spatial size (3x3 convolutions, stride 1,
same padding, tanh between layers, linear final layer) and is fine-tuned at
every incremental step. Checkpoints round-trip bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import gradengine as ge
from .errors import ShapeMismatchError
from .geometry import check_curvature
from .hierhead import HyperbolicHead, expand_head, head_forward
from .taxonomy import Taxonomy


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 3
    hidden: tuple = (16, 32)
    feat_dim: int = 8
    # Features are tanh-bounded and scaled so expmap0 lands well inside the
    # ball (radius <= tanh(sqrt(c) * feature_scale * sqrt(feat_dim))), which
    # keeps hyperplane logits out of the saturated boundary regime.
    feature_scale: float = 0.25


class SegModel:
    """Backbone + hyperbolic head over one taxonomy snapshot."""

    def __init__(self, taxonomy: Taxonomy, config: BackboneConfig = BackboneConfig(),
                 curvature: float = 3.0, seed: int = 0,
                 _weights: dict | None = None, _head: HyperbolicHead | None = None):
        self.config = config
        self.taxonomy = taxonomy
        self.curvature = check_curvature(curvature)
        self.seed = seed
        rng = np.random.default_rng(seed)
        dims = (config.in_channels,) + tuple(config.hidden) + (config.feat_dim,)
        self.conv_w = []
        self.conv_b = []
        for i, (cin, cout) in enumerate(zip(dims[:-1], dims[1:])):
            if _weights is not None:
                w, b = _weights[f"conv{i}.w"], _weights[f"conv{i}.b"]
            else:
                w = rng.normal(scale=np.sqrt(1.0 / (9 * cin)), size=(3, 3, cin, cout))
                b = np.zeros(cout)
            self.conv_w.append(ge.parameter(w))
            self.conv_b.append(ge.parameter(b))
        if _head is not None:
            self.head = _head
        else:
            self.head = HyperbolicHead(taxonomy, config.feat_dim, curvature, rng=rng)

    # -- parameters -----------------------------------------------------------

    def parameters(self) -> dict[str, ge.Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.conv_w, self.conv_b)):
            out[f"conv{i}.w"] = w
            out[f"conv{i}.b"] = b
        out.update(self.head.parameters())
        return out

    def zero_grads(self) -> None:
        for p in self.parameters().values():
            p.grad = np.zeros_like(p.value)

    # -- forward --------------------------------------------------------------

    def forward(self, images):
        """Images [B,H,W,C] or [H,W,C] to features of the same spatial size."""
        arr = ge._val(images)
        single = arr.ndim == 3
        if single:
            if isinstance(images, ge.Tensor):
                images = ge.reshape(images, (1,) + arr.shape)
            else:
                images = arr[None]
        if ge._val(images).shape[-1] != self.config.in_channels:
            raise ShapeMismatchError(
                f"expected {self.config.in_channels} input channels, "
                f"got shape {ge._val(images).shape}"
            )
        h = images
        for w, b in zip(self.conv_w, self.conv_b):
            h = ge.tanh(ge.conv3x3(h, w, b))
        h = ge.mul(h, self.config.feature_scale)
        if single:
            h = ge.reshape(h, h.shape[1:])
        return h

    def score_volume(self, images):
        """Per-pixel per-node sigmoid scores, differentiable end to end."""
        return head_forward(self.forward(images), self.head)

    # -- lifecycle --------------------------------------------------------------

    def expand(self, tax_new: Taxonomy, rng: np.random.Generator,
               init_scale: float = 0.01) -> None:
        """Grow the head for a new taxonomy; backbone weights are untouched."""
        self.head = expand_head(self.head, tax_new, init_scale, rng)
        self.taxonomy = tax_new

    def snapshot(self) -> "SegModel":
        """Deep frozen copy; later training never changes its outputs."""
        weights = {k: p.value.copy() for k, p in self.parameters().items()}
        head = HyperbolicHead(
            self.taxonomy,
            self.config.feat_dim,
            self.curvature,
            weights["head.offset"],
            weights["head.orientation"],
        )
        copy = SegModel(
            self.taxonomy, self.config, self.curvature, self.seed,
            _weights=weights, _head=head,
        )
        for p in copy.parameters().values():
            p.requires_grad = False
        return copy

    # -- checkpointing -----------------------------------------------------------

    def save(self, path) -> None:
        meta = {
            "config": asdict(self.config),
            "curvature": self.curvature,
            "seed": self.seed,
            "taxonomy": self.taxonomy.to_doc(),
        }
        arrays = {k.replace(".", "__"): p.value for k, p in self.parameters().items()}
        np.savez(path, __meta__=np.array(json.dumps(meta)), **arrays)

    @classmethod
    def load(cls, path) -> "SegModel":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["__meta__"]))
            arrays = {
                k.replace("__", "."): data[k] for k in data.files if k != "__meta__"
            }
        mc = dict(meta["config"])
        mc["hidden"] = tuple(mc["hidden"])
        cfg = BackboneConfig(**mc)
        tax = Taxonomy(
            (r["id"], r["name"], r["parent"]) for r in meta["taxonomy"]["nodes"]
        )
        head = HyperbolicHead(
            tax, cfg.feat_dim, meta["curvature"],
            arrays["head.offset"], arrays["head.orientation"],
        )
        return cls(tax, cfg, meta["curvature"], meta["seed"],
                   _weights=arrays, _head=head)
