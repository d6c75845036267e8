import math

import numpy as np
import pytest

from lidarpipe.cloud import (
    Box2D,
    CameraModel,
    ConfigurationError,
    PaintSource,
    PointCloud,
    SequencingError,
    Sweep,
    TRAIN_RANGE,
    INFERENCE_RANGE,
    densify,
    filter_range,
    paint,
)
from lidarpipe.geom import InvalidParameterError, RigidTransform


def make_cloud(xyz, k=3):
    return PointCloud.from_xyz(np.asarray(xyz, dtype=float), num_paint_classes=k)


def forward_camera(width=640, height=480):
    r = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    return CameraModel(
        fx=400.0, fy=400.0, cx=width / 2, cy=height / 2,
        width=width, height=height,
        extrinsic=RigidTransform(r, np.zeros(3)),
    )


class TestDensify:
    def test_no_past(self):
        cur = Sweep(make_cloud([[1, 2, 3]]), RigidTransform.identity(), 0.5)
        out = densify(cur, [])
        assert len(out) == 1
        assert out.dt[0] == 0.0
        np.testing.assert_allclose(out.xyz, [[1, 2, 3]], atol=1e-6)

    def test_translated_past_sweep(self):
        # past vehicle sat 1m behind in world; a world-origin point shifts
        past_pose = RigidTransform(np.eye(3), np.array([1.0, 0.0, 0.0]))
        cur_pose = RigidTransform.identity()
        past = Sweep(make_cloud([[-1.0, 0, 0]]), past_pose, 0.0)  # world origin
        cur = Sweep(make_cloud([[5, 5, 0]]), cur_pose, 0.1)
        out = densify(cur, [past])
        np.testing.assert_allclose(out.xyz[0], [0, 0, 0], atol=1e-6)
        assert out.dt[0] == pytest.approx(0.1)
        assert out.dt[1] == 0.0

    def test_concatenation_count(self, rng):
        n = 40
        sweeps = [
            Sweep(
                make_cloud(rng.uniform(-10, 10, (n, 3))),
                RigidTransform.identity(),
                0.1 * i,
            )
            for i in range(5)
        ]
        out = densify(sweeps[-1], sweeps[:-1])
        assert len(out) == 5 * n

    def test_identity_poses_concatenate_with_stamps(self, rng):
        a = make_cloud(rng.uniform(-1, 1, (10, 3)))
        b = make_cloud(rng.uniform(-1, 1, (7, 3)))
        out = densify(
            Sweep(b, RigidTransform.identity(), 0.2),
            [Sweep(a, RigidTransform.identity(), 0.0)],
        )
        np.testing.assert_array_equal(out.xyz[:10], a.xyz)
        np.testing.assert_array_equal(out.xyz[10:], b.xyz)
        assert np.all(out.dt[:10] == np.float32(0.2))

    def test_non_monotone_rejected(self):
        s0 = Sweep(make_cloud([[0, 0, 0]]), RigidTransform.identity(), 0.3)
        s1 = Sweep(make_cloud([[0, 0, 0]]), RigidTransform.identity(), 0.1)
        with pytest.raises(SequencingError):
            densify(s1, [s0])


class TestPaint:
    def test_pedestrian_box(self):
        cam = forward_camera()
        cloud = make_cloud([[10.0, 0.0, 0.0]])  # projects to image center
        src = PaintSource(cam, (Box2D(300, 220, 340, 260, class_id=1, score=0.9),))
        out = paint(cloud, [src])
        np.testing.assert_allclose(out.painted[0], [0.0, 0.9, 0.0])

    def test_outside_all_boxes_stays_zero(self):
        cam = forward_camera()
        cloud = make_cloud([[10.0, 0.0, 0.0]])
        src = PaintSource(cam, (Box2D(0, 0, 50, 50, class_id=0, score=0.8),))
        out = paint(cloud, [src])
        np.testing.assert_array_equal(out.painted[0], [0, 0, 0])

    def test_behind_camera_stays_zero(self):
        cam = forward_camera()
        cloud = make_cloud([[-10.0, 0.0, 0.0]])
        src = PaintSource(cam, (Box2D(0, 0, 640, 480, class_id=0, score=0.8),))
        out = paint(cloud, [src])
        np.testing.assert_array_equal(out.painted[0], [0, 0, 0])

    def test_overlapping_boxes_take_max(self):
        cam = forward_camera()
        cloud = make_cloud([[10.0, 0.0, 0.0]])
        src = PaintSource(
            cam,
            (
                Box2D(300, 220, 340, 260, class_id=0, score=0.4),
                Box2D(310, 230, 330, 250, class_id=0, score=0.7),
            ),
        )
        out = paint(cloud, [src])
        assert out.painted[0, 0] == pytest.approx(0.7)

    def test_segmentation_source(self):
        cam = forward_camera()
        label = -np.ones((480, 640), dtype=int)
        label[240, 320] = 2
        cloud = make_cloud([[10.0, 0.0, 0.0]])
        out = paint(cloud, [PaintSource(cam, (), label)])
        np.testing.assert_allclose(out.painted[0], [0, 0, 1.0])

    def test_only_paint_channels_change(self, rng):
        cam = forward_camera()
        data = rng.uniform(0, 1, (20, 8)).astype(np.float32)
        data[:, 0] = rng.uniform(5, 20, 20)  # in front of the camera
        data[:, 4:7] = 0
        cloud = PointCloud(data)
        src = PaintSource(cam, (Box2D(0, 0, 640, 480, class_id=0, score=0.5),))
        out = paint(cloud, [src])
        np.testing.assert_array_equal(out.data[:, :4], cloud.data[:, :4])
        np.testing.assert_array_equal(out.dt, cloud.dt)

    def test_idempotent(self, rng):
        cam = forward_camera()
        cloud = make_cloud(
            np.column_stack(
                [rng.uniform(5, 30, 50), rng.uniform(-5, 5, 50), rng.uniform(-1, 2, 50)]
            )
        )
        src = PaintSource(cam, (Box2D(100, 100, 500, 400, class_id=2, score=0.6),))
        once = paint(cloud, [src])
        twice = paint(once, [src])
        np.testing.assert_array_equal(once.data, twice.data)

    def test_binary_mode(self):
        cam = forward_camera()
        cloud = make_cloud([[10.0, 0.0, 0.0]])
        src = PaintSource(cam, (Box2D(300, 220, 340, 260, class_id=1, score=0.9),))
        out = paint(cloud, [src], binary_scores=True)
        assert out.painted[0, 1] == 1.0

    def test_channel_mismatch(self):
        cam = forward_camera()
        cloud = make_cloud([[10.0, 0.0, 0.0]], k=2)
        src = PaintSource(cam, (Box2D(0, 0, 640, 480, class_id=2, score=0.9),))
        with pytest.raises(ConfigurationError):
            paint(cloud, [src])

    def test_projection_roundtrip(self, rng):
        cam = forward_camera()
        cam_to_vehicle = cam.extrinsic.inverse()
        for _ in range(50):
            u = rng.uniform(0, cam.width - 1e-3)
            v = rng.uniform(0, cam.height - 1e-3)
            depth = rng.uniform(1.0, 50.0)
            ray = np.array(
                [(u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth]
            )
            point = cam_to_vehicle.apply(ray)
            u2, v2, valid = cam.project(point[None, :])
            assert valid[0]
            assert abs(u2[0] - u) < 1e-6 and abs(v2[0] - v) < 1e-6


class TestFilterRange:
    def test_origin_kept_in_train_range(self):
        out = filter_range(make_cloud([[0, 0, 0]]), *TRAIN_RANGE)
        assert len(out) == 1

    def test_range_widening_at_inference(self):
        cloud = make_cloud([[79.0, 0.0, 0.0]])
        assert len(filter_range(cloud, *TRAIN_RANGE)) == 0
        assert len(filter_range(cloud, *INFERENCE_RANGE)) == 1

    def test_half_open_upper_bound(self):
        cloud = make_cloud([[76.8, 0.0, 0.0]])
        assert len(filter_range(cloud, *TRAIN_RANGE)) == 0

    def test_inverted_range_rejected(self):
        with pytest.raises(InvalidParameterError):
            filter_range(make_cloud([[0, 0, 0]]), (1, -1), (-1, 1), (-1, 1))
