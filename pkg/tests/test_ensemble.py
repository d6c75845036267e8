import math

import numpy as np
import pytest

from conftest import random_box
from lidarpipe.ensemble import (
    ClassThresholds,
    DetectorError,
    FusionThresholds,
    GridSearchSpec,
    TtaPlan,
    default_plan,
    grid_search,
    identity_plan,
    run_tta,
    submission_thresholds_3d,
    submission_thresholds_domain_adaptation,
    thresholds_from_dict,
    thresholds_to_dict,
    wbf_fuse,
)
from lidarpipe.geom import Box3D, InvalidParameterError, TransformParams, bev_iou

LOOSE = FusionThresholds(
    (
        ClassThresholds(0.5, 0.0, 0.0),
        ClassThresholds(0.5, 0.0, 0.0),
        ClassThresholds(0.5, 0.0, 0.0),
    )
)


def vb(cx, cy, score, yaw=0.0):
    return Box3D(cx, cy, 1.0, 4.0, 2.0, 1.6, yaw, class_id=0, score=score)


class TestWbf:
    def test_singleton_fixed_point(self):
        b = vb(3.0, 4.0, 0.8, yaw=0.5)
        (out,) = wbf_fuse([[b]], LOOSE)
        assert out.score == pytest.approx(0.8)
        for attr in ("cx", "cy", "cz", "l", "w", "h", "yaw"):
            assert getattr(out, attr) == pytest.approx(getattr(b, attr), rel=1e-12)

    def test_two_identical_mean_score(self):
        b = vb(0.0, 0.0, 0.8)
        c = vb(0.0, 0.0, 0.6)
        (out,) = wbf_fuse([[b], [c]], LOOSE)
        assert out.score == pytest.approx(0.7)
        assert (out.cx, out.cy, out.l, out.w) == (0.0, 0.0, 4.0, 2.0)

    def test_disjoint_boxes_stay_separate(self):
        out = wbf_fuse([[vb(0, 0, 0.9), vb(20, 0, 0.8)]], LOOSE)
        assert len(out) == 2

    def test_pre_skip_threshold(self):
        thr = FusionThresholds(
            (ClassThresholds(0.5, 0.3, 0.0),) * 3
        )
        out = wbf_fuse([[vb(0, 0, 0.29)]], thr)
        assert out == []
        out = wbf_fuse([[vb(0, 0, 0.3)]], thr)
        assert len(out) == 1

    def test_post_skip_threshold(self):
        thr = FusionThresholds((ClassThresholds(0.5, 0.0, 0.5),) * 3)
        # present in 1 of 2 sets: score scaled to 0.45 < 0.5
        out = wbf_fuse([[vb(0, 0, 0.9)], []], thr)
        assert out == []
        out = wbf_fuse([[vb(0, 0, 0.9)], []], thr, score_scaling=False)
        assert len(out) == 1

    def test_score_scaling_min_members(self):
        b = vb(0, 0, 0.8)
        (out,) = wbf_fuse([[b], [b], []], LOOSE)
        assert out.score == pytest.approx(0.8 * 2 / 3)

    def test_order_invariance_distinct_scores(self, rng):
        sets = [
            [random_box(rng, span=10, cls=0) for _ in range(5)] for _ in range(3)
        ]
        a = wbf_fuse(sets, LOOSE)
        b = wbf_fuse(sets[::-1], LOOSE)
        assert len(a) == len(b)
        for x, y in zip(a, b):
            assert x.score == pytest.approx(y.score, rel=1e-12)
            assert (x.cx, x.cy) == pytest.approx((y.cx, y.cy), rel=1e-12)

    def test_fused_geometry_in_convex_hull(self, rng):
        for _ in range(30):
            base = vb(rng.uniform(-5, 5), rng.uniform(-5, 5), 0.5,
                      yaw=rng.uniform(-3, 3))
            members = [
                Box3D(
                    base.cx + rng.uniform(-0.1, 0.1),
                    base.cy + rng.uniform(-0.1, 0.1),
                    base.cz + rng.uniform(-0.1, 0.1),
                    base.l, base.w, base.h, base.yaw,
                    class_id=0, score=rng.uniform(0.3, 1.0),
                )
                for _ in range(4)
            ]
            out = wbf_fuse([[m] for m in members], LOOSE)
            assert len(out) == 1
            f = out[0]
            for attr in ("cx", "cy", "cz", "l", "w", "h"):
                vals = [getattr(m, attr) for m in members]
                assert min(vals) - 1e-9 <= getattr(f, attr) <= max(vals) + 1e-9

    def test_yaw_circular_mean_across_seam(self):
        a = vb(0, 0, 0.5, yaw=math.pi - 0.05)
        b = vb(0, 0, 0.5, yaw=-math.pi + 0.05)
        (out,) = wbf_fuse([[a], [b]], LOOSE)
        assert abs(out.yaw) == pytest.approx(math.pi)

    def test_refusion_idempotent(self, rng):
        sets = [[random_box(rng, span=20, cls=0) for _ in range(4)] for _ in range(3)]
        fused = wbf_fuse(sets, LOOSE)
        again = wbf_fuse([fused], LOOSE)
        assert len(again) == len(fused)
        for x, y in zip(again, fused):
            assert x.score == pytest.approx(y.score, rel=1e-12)

    def test_output_scores_above_post_threshold(self, rng):
        thr = FusionThresholds((ClassThresholds(0.6, 0.1, 0.25),) * 3)
        sets = [[random_box(rng, span=8) for _ in range(6)] for _ in range(3)]
        out = wbf_fuse(sets, thr)
        assert len(out) <= sum(map(len, sets))
        assert all(b.score >= 0.25 for b in out)

    def test_empty_input(self):
        assert wbf_fuse([], LOOSE) == []
        assert wbf_fuse([[], []], LOOSE) == []


class TestPresets:
    def test_3d_track_values(self):
        thr = submission_thresholds_3d()
        assert [c.iou for c in thr.per_class] == [0.80, 0.70, 0.65]
        assert [c.skip_pre for c in thr.per_class] == [0.10, 0.15, 0.25]
        assert [c.skip_post for c in thr.per_class] == [0.03, 0.03, 0.03]

    def test_domain_adaptation_values(self):
        thr = submission_thresholds_domain_adaptation()
        assert [c.skip_post for c in thr.per_class] == [0.05, 0.05, 0.05]
        assert [c.iou for c in thr.per_class] == [0.80, 0.70, 0.65]

    def test_dict_roundtrip(self):
        thr = submission_thresholds_3d()
        assert thresholds_from_dict(thresholds_to_dict(thr)) == thr

    def test_invalid_thresholds(self):
        with pytest.raises(InvalidParameterError):
            ClassThresholds(0.0, 0.1, 0.1)
        with pytest.raises(InvalidParameterError):
            ClassThresholds(0.5, 1.2, 0.1)


class TestTta:
    def test_plan_contains_identity(self):
        with pytest.raises(InvalidParameterError):
            TtaPlan((TransformParams(yaw=0.3),))
        assert len(identity_plan()) == 1

    def test_default_plan_structure(self):
        plan = default_plan()
        # 16 yaw angles crossed with {plain, 2 pitch, 2 roll, 2 scale, 2 tz}
        assert len(plan) == 16 * 9
        yaws = {t.yaw for t in plan.transforms}
        assert len(yaws) == 16
        assert any(t.scale == 0.95 for t in plan.transforms)
        assert any(t.pitch == pytest.approx(math.radians(0.5)) for t in plan.transforms)

    def test_identity_plan_equals_plain_detection(self, rng):
        gt = [random_box(rng, span=20, cls=0) for _ in range(4)]

        def detector(frame):
            return list(gt)

        out = run_tta(detector, None, identity_plan(), LOOSE,
                      transform_frame=lambda p, f: f)
        plain = wbf_fuse([gt], LOOSE)
        assert len(out) == len(plain)

    def test_equivariant_oracle_recovers_gt(self, rng):
        gt = [random_box(rng, span=20, cls=0, max_dim=4.0) for _ in range(5)]
        # keep boxes disjoint so fusion clusters them 1:1
        gt = [b for i, b in enumerate(gt)
              if all(bev_iou(b, o) == 0 for o in gt[:i])]

        def transform_frame(params, boxes):
            aff = params.compile()
            return [aff.apply_box(b) for b in boxes]

        def detector(boxes):
            return boxes

        fused = run_tta(detector, gt, default_plan(), LOOSE,
                        transform_frame=transform_frame)
        assert len(fused) == len(gt)
        fused = sorted(fused, key=lambda b: (round(b.cx, 3), round(b.cy, 3)))
        want = sorted(gt, key=lambda b: (round(b.cx, 3), round(b.cy, 3)))
        for got, exp in zip(fused, want):
            assert got.cx == pytest.approx(exp.cx, abs=1e-6)
            assert got.cy == pytest.approx(exp.cy, abs=1e-6)
            assert got.cz == pytest.approx(exp.cz, abs=1e-6)
            assert got.l == pytest.approx(exp.l, abs=1e-6)

    def test_detector_failure_names_transform(self):
        def detector(frame):
            raise RuntimeError("boom")

        with pytest.raises(DetectorError, match="transform"):
            run_tta(detector, None, identity_plan(), LOOSE,
                    transform_frame=lambda p, f: f)


class TestGridSearch:
    def test_lattice_size(self):
        assert len(GridSearchSpec().lattice()) == 9 * 6 * 20 == 1080

    def test_constant_objective_tie_break(self):
        best, trace = grid_search(lambda p: 1.0)
        assert best == (0.80, 0.25, 0.20)
        assert len(trace) == 1080

    def test_planted_optimum(self):
        planted = (0.55, 0.10, 0.07)

        def objective(p):
            return -sum((a - b) ** 2 for a, b in zip(p, planted))

        best, _ = grid_search(objective)
        assert best == pytest.approx(planted)

    def test_parallel_matches_serial(self):
        best_s, trace_s = grid_search(_quadratic)
        best_p, trace_p = grid_search(_quadratic, jobs=2)
        assert best_s == best_p
        assert trace_s == trace_p


def _quadratic(p):
    return -((p[0] - 0.6) ** 2) - (p[1] - 0.05) ** 2 - (p[2] - 0.12) ** 2
