import math

import numpy as np
import pytest

from hyciss import BACKGROUND, geometry as geo, gradengine as ge
from hyciss.hierhead import HyperbolicHead, decode, decode_flat, expand_head, head_forward
from hyciss.taxonomy import Taxonomy, grow

from conftest import fd_grad, rel_err


def make_head(tax, feat_dim=4, c=1.0, seed=0):
    return HyperbolicHead(tax, feat_dim, c, rng=np.random.default_rng(seed))


class TestHeadForward:
    def test_zero_feature_origin_hyperplane_gives_half(self, toy_tree):
        head = make_head(toy_tree)
        scores = head_forward(ge.Tensor(np.zeros((1, 1, 4))), head).value
        assert np.allclose(scores, 0.5, atol=1e-12)

    def test_point_on_hyperplane_scales_invariant(self, toy_tree, rng):
        # scaling an orientation never moves the 0.5 level set
        head = make_head(toy_tree)
        head.offset_param.value[:] = rng.normal(size=head.offset_param.shape) * 0.2
        feats = ge.Tensor(np.zeros((1, 1, 4)))
        zero_off = make_head(toy_tree)
        zero_off.orientation.value[:] = head.orientation.value * 7.5
        s1 = head_forward(feats, zero_off).value
        assert np.allclose(s1, 0.5, atol=1e-12)

    def test_scalar_composition_with_geometry_oracle(self):
        # 1x1 feature, one root-child node, c=1: score equals the sigmoid of
        # the scalar hyperplane logit of expmap0(feature)
        tax = Taxonomy([(1, "r", None), (2, "a", 1)])
        head = HyperbolicHead(tax, 2, 1.0, offsets=np.zeros((1, 2)),
                              orientations=np.array([[1.0, 0.0]]))
        f = np.array([[[math.atanh(0.2), 0.0]]])  # expmap0 -> (0.2, 0)
        score = head_forward(ge.Tensor(f), head).value[0, 0, 0]
        logit = 2.0 * math.log(1.5)  # geometry oracle value at x=(0.2,0)
        assert score == pytest.approx(1.0 / (1.0 + math.exp(-logit)), abs=1e-12)
        assert score == pytest.approx(9.0 / 13.0, abs=1e-12)

    def test_matches_per_pixel_geometry_composition(self, toy_tree, rng):
        head = make_head(toy_tree, feat_dim=3, c=3.0, seed=5)
        head.offset_param.value[:] = rng.normal(size=(4, 3)) * 0.2
        feats = rng.normal(size=(2, 2, 3)) * 0.4
        scores = head_forward(ge.Tensor(feats), head).value
        for i in range(2):
            for j in range(2):
                x = geo.project(geo.expmap0(feats[i, j], 3.0), 3.0)
                for nid, k in toy_tree.chan.items():
                    off = geo.project(
                        geo.expmap0(head.offset_param.value[k], 3.0), 3.0
                    )
                    lg = geo.hyperplane_logit(x, off, head.orientation.value[k], 3.0)
                    expect = 1.0 / (1.0 + math.exp(-lg))
                    assert scores[i, j, k] == pytest.approx(expect, rel=1e-10)

    def test_scores_in_open_interval(self, toy_tree, rng):
        head = make_head(toy_tree)
        head.orientation.value[:] *= 500.0  # force saturation
        feats = rng.normal(size=(3, 3, 4))
        s = head_forward(ge.Tensor(feats), head).value
        assert (s > 0).all() and (s < 1).all()

    def test_gradients_match_fd(self, toy_tree, rng):
        for trial in range(10):
            head = make_head(toy_tree, seed=trial)
            head.offset_param.value[:] = rng.normal(size=(4, 4)) * 0.2
            feats = ge.parameter(rng.normal(size=(2, 2, 4)) * 0.3)
            cot = rng.normal(size=(2, 2, 4))
            params = [feats, head.offset_param, head.orientation]
            for p in params:
                p.grad = None
            with ge.Tape() as tape:
                loss = ge.total(ge.mul(head_forward(feats, head), cot))
            tape.backward(loss)

            def scalar(which, v):
                h2 = HyperbolicHead(
                    toy_tree, 4, head.curvature,
                    v if which == 1 else head.offset_param.value,
                    v if which == 2 else head.orientation.value,
                )
                f = v if which == 0 else feats.value
                return float(ge.total(ge.mul(head_forward(ge.Tensor(f), h2), cot)).value)

            for which, p in enumerate(params):
                fd = fd_grad(lambda v: scalar(which, v), p.value, h=1e-6)
                assert rel_err(p.grad, fd) < 1e-5


class TestExpandHead:
    def test_empty_increment_identical(self, toy_tree):
        head = make_head(toy_tree)
        new = expand_head(head, toy_tree, 0.01, np.random.default_rng(0))
        assert np.array_equal(new.offset_param.value, head.offset_param.value)
        assert np.array_equal(new.orientation.value, head.orientation.value)

    def test_zero_noise_refinement_copies_parent(self, toy_tree):
        head = make_head(toy_tree)
        organ = toy_tree.names["organ"]
        grown = grow(toy_tree, [(6, "covered", organ), (7, "parenchyma", organ)])
        new = expand_head(head, grown, 0.0, np.random.default_rng(0))
        for child in (6, 7):
            assert np.array_equal(
                new.offset_param.value[grown.chan[child]],
                head.offset_param.value[toy_tree.chan[organ]],
            )
            assert np.array_equal(
                new.orientation.value[grown.chan[child]],
                head.orientation.value[toy_tree.chan[organ]],
            )

    def test_existing_rows_bit_identical(self, toy_tree, rng):
        head = make_head(toy_tree)
        head.offset_param.value[:] = rng.normal(size=(4, 4))
        grown = grow(toy_tree, [(6, "gauze", 1)])
        new = expand_head(head, grown, 0.01, np.random.default_rng(3))
        for nid in toy_tree.class_ids:
            assert np.array_equal(
                new.offset_param.value[grown.chan[nid]],
                head.offset_param.value[toy_tree.chan[nid]],
            )
            assert np.array_equal(
                new.orientation.value[grown.chan[nid]],
                head.orientation.value[toy_tree.chan[nid]],
            )

    def test_new_root_child_zero_offset_unit_orientation(self, toy_tree):
        head = make_head(toy_tree)
        grown = grow(toy_tree, [(6, "gauze", 1)])
        new = expand_head(head, grown, 0.01, np.random.default_rng(3))
        k = grown.chan[6]
        assert np.array_equal(new.offset_param.value[k], np.zeros(4))
        assert np.linalg.norm(new.orientation.value[k]) == pytest.approx(1.0)

    def test_chained_new_nodes_derive_from_new_parent(self, toy_tree):
        head = make_head(toy_tree)
        grown = grow(toy_tree, [(6, "gauze", 1), (7, "pad", 6)])
        new = expand_head(head, grown, 0.0, np.random.default_rng(3))
        assert np.array_equal(
            new.orientation.value[grown.chan[7]],
            new.orientation.value[grown.chan[6]],
        )


class TestDecode:
    def test_single_confident_leaf(self):
        tax = Taxonomy([(1, "r", None), (2, "a", 1)])
        out = decode(np.array([[[0.9]]]), tax)
        assert out[0, 0] == 2

    def test_all_below_half_is_background(self, toy_tree):
        out = decode(np.full((2, 2, 4), 0.49), toy_tree)
        assert (out == BACKGROUND).all()

    def test_greedy_descent_example(self, toy_tree):
        # scores: instrument 0.7, organ low, shaft 0.6, jaws 0.8 -> jaws
        s = np.zeros((1, 1, 4))
        s[0, 0, toy_tree.chan[toy_tree.names["instrument"]]] = 0.7
        s[0, 0, toy_tree.chan[toy_tree.names["organ"]]] = 0.1
        s[0, 0, toy_tree.chan[toy_tree.names["shaft"]]] = 0.6
        s[0, 0, toy_tree.chan[toy_tree.names["jaws"]]] = 0.8
        assert decode(s, toy_tree)[0, 0] == toy_tree.names["jaws"]

    def test_monotone_logit_transform_invariance(self, toy_tree, rng):
        # a sign-preserving monotone remap of the logits never changes the
        # decoded labels (argmax descent; 0.5 maps to 0.5)
        s = rng.random((4, 4, 4)) * 0.9 + 0.05
        logits = np.log(s / (1 - s))
        for transform in (lambda z: 2.0 * z, lambda z: z**3, np.tanh):
            s2 = 1.0 / (1.0 + np.exp(-transform(logits)))
            assert np.array_equal(decode(s, toy_tree), decode(s2, toy_tree))

    def test_decode_flat(self, toy_tree):
        s = np.zeros((1, 2, 4))
        s[0, 0, toy_tree.chan[4]] = 0.8  # leaf shaft
        s[0, 1, :] = 0.2
        out = decode_flat(s, toy_tree)
        assert out[0, 0] == 4 and out[0, 1] == BACKGROUND


class TestOrientationClamp:
    def test_floor_restores_norm(self, toy_tree):
        head = make_head(toy_tree)
        head.orientation.value[1] = 0.0
        head.orientation.value[2] *= 1e-20
        head.clamp_orientations()
        norms = np.linalg.norm(head.orientation.value, axis=1)
        assert (norms >= 1e-12 - 1e-18).all()

    def test_offset_cap(self, toy_tree):
        head = make_head(toy_tree, c=3.0)
        head.offset_param.value[0] = np.array([10.0, 0.0, 0.0, 0.0])
        head.clamp_offsets()
        cap = np.arctanh(0.9) / math.sqrt(3.0)
        assert np.linalg.norm(head.offset_param.value[0]) <= cap * (1 + 1e-12)
