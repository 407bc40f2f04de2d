import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from autoensemble.core import BBox, DetectionGroup, canonical_sort, iou
from autoensemble.errors import ConfigError, DomainError
from autoensemble.fusion import (
    FusionOp,
    OpKind,
    OpParams,
    adj_nms,
    apply_op,
    default_ops,
    fuse_groups,
    identity_left,
    identity_right,
    nms,
    nmw_naive,
    soft_nms,
    wbf,
)

from oracles import ref_nms, ref_nmw, ref_soft_nms, ref_wbf
from synth import random_boxes


def close_boxes(got, want, rel=1e-9):
    assert len(got) == len(want)
    for g, w in zip(got, want):
        assert g.class_id == w.class_id
        np.testing.assert_allclose(g.xyxy, w.xyxy, rtol=rel, atol=1e-9)
        assert g.score == pytest.approx(w.score, rel=rel, abs=1e-12)


def grp(gid, boxes, img="a"):
    return DetectionGroup.from_boxes(gid, {img: boxes})


@st.composite
def box_lists(draw, max_size=12, classes=("vehicle", "pedestrian")):
    seed = draw(st.integers(0, 2**31))
    n = draw(st.integers(0, max_size))
    return random_boxes(np.random.default_rng(seed), n, classes=classes,
                        quantize=draw(st.booleans()))


class TestNMS:
    def test_single(self):
        b = BBox(0, 0, 1, 1, 0.4)
        assert nms([b]) == [b]

    def test_identical_pair(self):
        hi, lo = BBox(0, 0, 10, 10, 0.9), BBox(0, 0, 10, 10, 0.8)
        assert nms([lo, hi], OpParams(iou_thresh=0.5)) == [hi]

    def test_class_aware(self):
        a, b = BBox(0, 0, 10, 10, 0.9, "vehicle"), BBox(0, 0, 10, 10, 0.8, "cyclist")
        assert nms([a, b]) == [a, b]
        assert nms([a, b], OpParams(class_aware=False)) == [a]

    def test_twenty_random_boxes_match_reference(self):
        rng = np.random.default_rng(20)
        bs = random_boxes(rng, 20, classes=("vehicle", "cyclist"))
        assert nms(bs, OpParams(iou_thresh=0.5)) == ref_nms(bs, 0.5)

    @given(box_lists(), st.floats(0.05, 0.95))
    def test_properties(self, bs, t):
        p = OpParams(iou_thresh=t)
        out = nms(bs, p)
        assert nms(out, p) == out
        assert all(b in bs for b in out)
        for i, a in enumerate(out):
            for b in out[i + 1:]:
                if a.class_id == b.class_id:
                    assert iou(a, b) < t

    def test_max_per_image(self):
        bs = [BBox(k * 10, 0, k * 10 + 5, 5, 0.1 * (k + 1)) for k in range(5)]
        out = nms(bs, OpParams(max_per_image=2))
        assert [b.score for b in out] == pytest.approx([0.5, 0.4])


class TestSoftNMS:
    def test_disjoint_unchanged(self):
        bs = [BBox(0, 0, 1, 1, 0.7), BBox(5, 5, 6, 6, 0.6)]
        assert soft_nms(bs, OpParams(soft_method="linear")) == bs
        assert soft_nms(bs, OpParams(soft_method="gaussian")) == bs

    def test_linear_worked_example(self):
        # overlap of [0,0,10,10] and [0,0,6,10] is 60/100
        out = soft_nms([BBox(0, 0, 10, 10, 0.9), BBox(0, 0, 6, 10, 0.8)],
                       OpParams(soft_method="linear", iou_thresh=0.5))
        assert out[1].score == pytest.approx(0.8 * (1 - 0.6), rel=1e-12)
        assert out[1].score == pytest.approx(0.32, rel=1e-12)

    def test_gaussian_worked_example(self):
        out = soft_nms([BBox(0, 0, 10, 10, 0.9), BBox(0, 0, 6, 10, 0.8)],
                       OpParams(soft_method="gaussian", soft_sigma=0.5))
        assert out[1].score == pytest.approx(0.8 * math.exp(-0.36 / 0.5), rel=1e-12)
        assert out[1].score == pytest.approx(0.3894, abs=5e-5)

    def test_linear_below_threshold_untouched(self):
        out = soft_nms([BBox(0, 0, 10, 10, 0.9), BBox(0, 0, 6, 10, 0.8)],
                       OpParams(soft_method="linear", iou_thresh=0.7))
        assert out[1].score == 0.8

    def test_floor_drops(self):
        out = soft_nms([BBox(0, 0, 10, 10, 0.9), BBox(0, 0, 10, 10, 0.8)],
                       OpParams(soft_method="linear", score_floor=0.01))
        assert len(out) == 1

    @given(box_lists(), st.sampled_from(["linear", "gaussian"]))
    def test_floor_zero_keeps_count_and_never_raises_scores(self, bs, method):
        out = soft_nms(bs, OpParams(soft_method=method, score_floor=0.0))
        assert len(out) == len(bs)
        originals = {}
        for b in bs:
            originals.setdefault(b.xyxy + (b.class_id,), []).append(b.score)
        for b in out:
            assert b.score <= max(originals[b.xyxy + (b.class_id,)]) + 1e-15

    @given(box_lists(), st.sampled_from(["linear", "gaussian"]), st.floats(0.1, 0.9), st.floats(0.1, 2.0))
    def test_matches_reference(self, bs, method, t, sigma):
        p = OpParams(soft_method=method, iou_thresh=t, soft_sigma=sigma, score_floor=0.001)
        close_boxes(soft_nms(bs, p), ref_soft_nms(bs, t, sigma, method, 0.001))


class TestAdjNMS:
    def test_trivial(self):
        b = BBox(0, 0, 1, 1, 0.4)
        assert adj_nms([b]) == [b]
        bs = [BBox(0, 0, 1, 1, 0.7), BBox(5, 5, 6, 6, 0.6)]
        assert adj_nms(bs) == bs

    def test_composition(self):
        cluster = [BBox(0, 0, 10, 10, 0.9), BBox(0.5, 0, 10.5, 10, 0.8), BBox(0, 0.5, 10, 10.5, 0.7)]
        far = [BBox(50, 50, 60, 60, 0.6), BBox(55, 50, 67, 60, 0.5)]
        bs = cluster + far
        p = OpParams(soft_sigma=0.5)
        expected = soft_nms(nms(bs, replace(p, iou_thresh=0.5)), replace(p, soft_method="gaussian"))
        assert adj_nms(bs, p) == expected
        assert len(adj_nms(bs, p)) == 3


class TestNMW:
    def test_single(self):
        b = BBox(0, 0, 1, 1, 0.4)
        assert nmw_naive([b]) == [b]

    def test_worked_example(self):
        out = nmw_naive([BBox(0, 0, 10, 10, 0.9), BBox(2, 0, 12, 10, 0.3)], OpParams(iou_thresh=0.3))
        assert len(out) == 1
        np.testing.assert_allclose(out[0].xyxy, [0.5, 0, 10.5, 10], atol=1e-12)
        assert out[0].score == 0.9

    def test_disjoint(self):
        bs = [BBox(0, 0, 1, 1, 0.7), BBox(5, 5, 6, 6, 0.6)]
        assert nmw_naive(bs) == bs

    def test_zero_scores_fall_back_to_mean(self, caplog):
        out = nmw_naive([BBox(0, 0, 10, 10, 0.0), BBox(2, 0, 12, 10, 0.0)], OpParams(iou_thresh=0.3))
        np.testing.assert_allclose(out[0].xyxy, [1, 0, 11, 10])
        assert "unweighted mean" in caplog.text

    @given(box_lists(), st.floats(0.1, 0.9))
    def test_matches_reference(self, bs, t):
        close_boxes(nmw_naive(bs, OpParams(iou_thresh=t)), ref_nmw(bs, t))


class TestWBF:
    def test_empty_groups_rejected(self):
        with pytest.raises(DomainError):
            wbf([])

    def test_identity_single_group(self):
        bs = [BBox(0, 0, 1, 1, 0.7), BBox(5, 5, 6, 6, 0.6, "cyclist")]
        assert wbf([(bs, 1.0)], OpParams(score_floor=0.0)) == canonical_sort(bs)

    def test_worked_example(self):
        out = wbf([([BBox(0, 0, 10, 10, 0.6)], 1.0), ([BBox(0, 0, 10, 10, 1.0)], 1.0)],
                  OpParams(iou_thresh=0.55, wbf_model_count=2))
        assert len(out) == 1
        np.testing.assert_allclose(out[0].xyxy, [0, 0, 10, 10])
        assert out[0].score == pytest.approx(0.8, rel=1e-12)

    def test_singleton_cluster_is_rescaled(self):
        out = wbf([([BBox(0, 0, 10, 10, 0.6)], 1.0), ([BBox(50, 50, 60, 60, 1.0)], 1.0)])
        assert sorted(b.score for b in out) == pytest.approx([0.3, 0.5])

    def test_three_boxes_two_groups(self):
        g1 = [BBox(0, 0, 10, 10, 0.9), BBox(1, 1, 11, 11, 0.5)]
        g2 = [BBox(0.5, 0, 10.5, 10, 0.7)]
        got = wbf([(g1, 1.0), (g2, 1.0)])
        close_boxes(got, ref_wbf([(g1, 1.0), (g2, 1.0)], 0.55, floor=0.001))
        assert len(got) == 1
        assert got[0].score == pytest.approx((0.9 + 0.5 + 0.7) / 3 * 2 / 2)

    def test_model_weight(self):
        out = wbf([([BBox(0, 0, 10, 10, 0.8)], 0.5)], OpParams(wbf_model_count=1))
        assert out[0].score == pytest.approx(0.4)

    @given(st.lists(box_lists(max_size=8), min_size=1, max_size=3), st.floats(0.2, 0.9))
    def test_matches_reference(self, lists, t):
        groups = [(bs, 1.0) for bs in lists]
        close_boxes(wbf(groups, OpParams(iou_thresh=t)), ref_wbf(groups, t, floor=0.001))

    @given(st.lists(box_lists(max_size=8), min_size=1, max_size=3))
    def test_fused_inside_hull(self, lists):
        out = wbf([(bs, 1.0) for bs in lists], OpParams(score_floor=0.0))
        pooled = [b for bs in lists for b in bs]
        for f in out:
            same = [b for b in pooled if b.class_id == f.class_id]
            assert min(b.x1 for b in same) <= f.x1 and f.x2 <= max(b.x2 for b in same)
            assert min(b.y1 for b in same) <= f.y1 and f.y2 <= max(b.y2 for b in same)


@settings(max_examples=60)
@given(box_lists(classes=("vehicle", "pedestrian", "cyclist")), st.randoms(use_true_random=False),
       st.sampled_from(["nms", "soft_nms", "adj_nms", "nmw_naive", "wbf"]))
def test_permutation_invariant_and_class_partition(bs, rnd, kind):
    op = FusionOp(kind)
    shuffled = list(bs)
    rnd.shuffle(shuffled)

    def run(boxes):
        return fuse_groups(op, [grp("x", boxes)]).boxes("a")

    assert run(shuffled) == run(bs)
    per_class = []
    for cls in sorted({b.class_id for b in bs}):
        per_class.extend(run([b for b in bs if b.class_id == cls]))
    assert canonical_sort(per_class) == list(run(bs))


@given(box_lists())
def test_nmw_inside_hull(bs):
    for f in nmw_naive(bs, OpParams(iou_thresh=0.3)):
        same = [b for b in bs if b.class_id == f.class_id]
        assert min(b.x1 for b in same) <= f.x1 and f.x2 <= max(b.x2 for b in same)


class TestGroupOps:
    def test_identity_ops(self):
        a, b = grp("A", [BBox(0, 0, 1, 1, 0.5)]), grp("B", [])
        assert identity_left(a, b) is a
        assert identity_right(a, b) is b
        assert identity_left(a, a) is identity_right(a, a) is a
        assert apply_op(FusionOp("o1"), a, b) is a
        assert apply_op(FusionOp("o2"), a, b) is b

    def test_pool_with_empty(self):
        bs = [BBox(0, 0, 10, 10, 0.9), BBox(1, 0, 11, 10, 0.5), BBox(40, 40, 50, 50, 0.4)]
        out = apply_op(FusionOp("nms"), grp("A", bs), DetectionGroup("B"))
        assert list(out.boxes("a")) == nms(bs)
        assert out.group_id == "nms(A,B)"

    def test_wbf_pair(self):
        out = apply_op(FusionOp("wbf"), grp("A", [BBox(0, 0, 10, 10, 0.6)]), grp("B", [BBox(0, 0, 10, 10, 1.0)]))
        (only,) = out.boxes("a")
        assert only.score == pytest.approx(0.8)

    def test_images_are_independent(self):
        a = DetectionGroup.from_boxes("A", {"i1": [BBox(0, 0, 10, 10, 0.9)]})
        b = DetectionGroup.from_boxes("B", {"i2": [BBox(0, 0, 10, 10, 0.8)]})
        out = apply_op(FusionOp("nms"), a, b)
        assert out.image_ids == ["i1", "i2"]
        assert out.num_boxes == 2

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            FusionOp("magic")
        with pytest.raises(DomainError):
            apply_op("nms", grp("A", []), grp("B", []))

    def test_default_ops(self):
        assert [o.name for o in default_ops()] == ["nms", "adj_nms", "nmw_naive", "o1", "o2"]
        assert "wbf" in [o.name for o in default_ops(with_wbf=True)]

    def test_params_validation(self):
        with pytest.raises(ConfigError):
            OpParams(iou_thresh=1.0)
        with pytest.raises(ConfigError):
            OpParams(soft_sigma=0)
        with pytest.raises(ConfigError):
            OpParams(score_floor=1.0)
        assert OpParams().thresh_for(OpKind.WBF) == 0.55
        assert OpParams().thresh_for(OpKind.NMS) == 0.5
