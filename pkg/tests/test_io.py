import numpy as np
import pytest

from lidarpipe import io
from lidarpipe.cloud import CameraModel, PointCloud
from lidarpipe.geom import Box3D, RigidTransform


def random_cloud(rng, n=50, k=3):
    data = rng.uniform(-10, 10, (n, 5 + k)).astype(np.float32)
    return PointCloud(data, k)


class TestFrameFiles:
    def test_roundtrip(self, tmp_path, rng):
        cloud = random_cloud(rng)
        io.write_frame(tmp_path / "a.pcf", cloud)
        back = io.read_frame(tmp_path / "a.pcf")
        np.testing.assert_array_equal(back.data, cloud.data)
        assert back.num_paint_classes == 3

    def test_roundtrip_k2(self, tmp_path, rng):
        cloud = random_cloud(rng, n=7, k=2)
        io.write_frame(tmp_path / "a.pcf", cloud)
        assert io.read_frame(tmp_path / "a.pcf").num_paint_classes == 2

    def test_empty_cloud(self, tmp_path):
        io.write_frame(tmp_path / "e.pcf", PointCloud.empty())
        assert len(io.read_frame(tmp_path / "e.pcf")) == 0

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad.pcf").write_bytes(b"NOPE" + b"\x00" * 8)
        with pytest.raises(io.FormatError, match="magic"):
            io.read_frame(tmp_path / "bad.pcf")

    def test_truncated(self, tmp_path, rng):
        io.write_frame(tmp_path / "t.pcf", random_cloud(rng, n=10))
        raw = (tmp_path / "t.pcf").read_bytes()
        (tmp_path / "t.pcf").write_bytes(raw[:-5])
        with pytest.raises(io.FormatError, match="bytes"):
            io.read_frame(tmp_path / "t.pcf")

    def test_byte_identical_rewrite(self, tmp_path, rng):
        cloud = random_cloud(rng)
        io.write_frame(tmp_path / "a.pcf", cloud)
        io.write_frame(tmp_path / "b.pcf", io.read_frame(tmp_path / "a.pcf"))
        assert (tmp_path / "a.pcf").read_bytes() == (tmp_path / "b.pcf").read_bytes()


class TestYamlSidecars:
    def test_transform_roundtrip(self, rng):
        t = RigidTransform.from_yaw_translation(0.7, [1.5, -2.0, 0.25])
        back = io.transform_from_dict(io.transform_to_dict(t))
        np.testing.assert_allclose(back.rotation, t.rotation)
        np.testing.assert_allclose(back.translation, t.translation)

    def test_camera_roundtrip(self):
        cam = CameraModel(
            fx=400.0, fy=410.0, cx=320.0, cy=240.0, width=640, height=480,
            extrinsic=RigidTransform.from_yaw_translation(0.1, [0, 0, 1.8]),
        )
        back = io.camera_from_dict(io.camera_to_dict(cam))
        assert (back.fx, back.fy, back.width) == (400.0, 410.0, 640)
        np.testing.assert_allclose(back.extrinsic.translation, [0, 0, 1.8])

    def test_yaml_file_roundtrip(self, tmp_path):
        obj = {"b": 1, "a": [1, 2, 3]}
        io.write_yaml(tmp_path / "x.yaml", obj)
        assert io.read_yaml(tmp_path / "x.yaml") == obj

    def test_yaml_deterministic_key_order(self, tmp_path):
        io.write_yaml(tmp_path / "1.yaml", {"b": 1, "a": 2})
        io.write_yaml(tmp_path / "2.yaml", {"a": 2, "b": 1})
        assert (tmp_path / "1.yaml").read_bytes() == (tmp_path / "2.yaml").read_bytes()


class TestDetectionFiles:
    def boxes(self):
        return [
            Box3D(1.25, -3.5, 0.5, 4.6, 2.1, 1.7, 0.3, class_id=0, score=0.91),
            Box3D(10.0, 4.0, 0.9, 0.9, 0.85, 1.7, -2.0, class_id=1, score=0.4),
        ]

    def test_roundtrip(self, tmp_path):
        io.write_detections(tmp_path / "f.det", "frame_007", self.boxes())
        fid, back = io.read_detections(tmp_path / "f.det")
        assert fid == "frame_007"
        assert len(back) == 2
        assert back[0].class_id == 0 and back[1].class_id == 1
        assert back[0].score == pytest.approx(0.91)
        assert back[0].cx == pytest.approx(1.25)

    def test_line_format(self, tmp_path):
        io.write_detections(tmp_path / "f.det", "f0", self.boxes()[:1])
        line = (tmp_path / "f.det").read_text().splitlines()[0]
        parts = line.split()
        assert parts[0] == "f0" and parts[1] == "vehicle"
        assert len(parts) == 10

    def test_mixed_frame_ids_rejected(self, tmp_path):
        (tmp_path / "bad.det").write_text(
            "f0 vehicle 0.9 0 0 0 4 2 1.6 0\n"
            "f1 vehicle 0.9 0 0 0 4 2 1.6 0\n"
        )
        with pytest.raises(io.FormatError, match="mixed"):
            io.read_detections(tmp_path / "bad.det")

    def test_wrong_field_count(self, tmp_path):
        (tmp_path / "bad.det").write_text("f0 vehicle 0.9 0 0 0\n")
        with pytest.raises(io.FormatError, match="fields"):
            io.read_detections(tmp_path / "bad.det")

    def test_dir_roundtrip(self, tmp_path):
        frames = {"a": self.boxes(), "b": [], "c": self.boxes()[:1]}
        io.write_detection_dir(tmp_path / "dets", frames)
        back = io.read_detection_dir(tmp_path / "dets")
        assert set(back) == {"a", "b", "c"}
        assert back["b"] == []
        assert len(back["a"]) == 2

    def test_precision_survives_roundtrip(self, tmp_path):
        b = Box3D(
            1.234567891, -2.34567891, 0.123456789,
            4.123456789, 2.023456789, 1.623456789, 0.987654321,
            class_id=2, score=0.123456789,
        )
        io.write_detections(tmp_path / "p.det", "f", [b])
        _, (back,) = io.read_detections(tmp_path / "p.det")
        assert back.cx == pytest.approx(b.cx, rel=1e-8)
        assert back.yaw == pytest.approx(b.yaw, rel=1e-8)


def test_check_known_keys():
    io.check_known_keys({"a": 1}, {"a", "b"}, "cfg")
    with pytest.raises(io.FormatError, match="unknown keys"):
        io.check_known_keys({"a": 1, "zz": 2}, {"a"}, "cfg")
