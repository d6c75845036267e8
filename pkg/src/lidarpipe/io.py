"""On-disk formats: binary frame files, YAML sidecars, detection-set text
files and threshold presets.

Frame file layout (little-endian): magic "PCF1", u32 point count, u32 paint
channel count K, then per point (5+K) float32 values in order
x, y, z, reflectance, painted[0..K), dt.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import yaml

from .cloud import CameraModel, PointCloud
from .geom import Box3D, RigidTransform, class_id, CLASS_NAMES

FRAME_MAGIC = b"PCF1"


class FormatError(RuntimeError):
    pass


# ---- frame files ------------------------------------------------------------

def write_frame(path, points: PointCloud) -> None:
    data = np.ascontiguousarray(points.data, dtype="<f4")
    with open(path, "wb") as f:
        f.write(FRAME_MAGIC)
        f.write(struct.pack("<II", len(points), points.num_paint_classes))
        f.write(data.tobytes())


def read_frame(path) -> PointCloud:
    raw = Path(path).read_bytes()
    if raw[:4] != FRAME_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    count, k = struct.unpack("<II", raw[4:12])
    width = 5 + k
    expected = 12 + 4 * count * width
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, got {len(raw)}")
    data = np.frombuffer(raw[12:], dtype="<f4").reshape(count, width)
    return PointCloud(data.copy(), k)


# ---- YAML sidecars (poses, cameras) ----------------------------------------

def transform_to_dict(t: RigidTransform) -> dict:
    return {
        "rotation": [[float(v) for v in row] for row in t.rotation],
        "translation": [float(v) for v in t.translation],
    }


def transform_from_dict(d: dict) -> RigidTransform:
    return RigidTransform(np.array(d["rotation"]), np.array(d["translation"]))


def camera_to_dict(cam: CameraModel) -> dict:
    return {
        "fx": cam.fx,
        "fy": cam.fy,
        "cx": cam.cx,
        "cy": cam.cy,
        "width": cam.width,
        "height": cam.height,
        "extrinsic": transform_to_dict(cam.extrinsic),
    }


def camera_from_dict(d: dict) -> CameraModel:
    return CameraModel(
        fx=d["fx"],
        fy=d["fy"],
        cx=d["cx"],
        cy=d["cy"],
        width=d["width"],
        height=d["height"],
        extrinsic=transform_from_dict(d["extrinsic"]),
    )


def write_yaml(path, obj) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(obj, f, sort_keys=True)


def read_yaml(path):
    with open(path) as f:
        return yaml.safe_load(f)


# ---- detection-set files ----------------------------------------------------

def write_detections(path, frame_id: str, boxes: list[Box3D]) -> None:
    """One box per line: frame id, class, score, cx cy cz l w h yaw (%.9g)."""
    with open(path, "w") as f:
        for b in boxes:
            vals = " ".join(
                f"{v:.9g}" for v in (b.score, b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw)
            )
            f.write(f"{frame_id} {CLASS_NAMES[b.class_id]} {vals}\n")


def read_detections(path) -> tuple[str, list[Box3D]]:
    frame_id = None
    boxes = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 10:
            raise FormatError(f"{path}:{lineno}: expected 10 fields, got {len(parts)}")
        fid, cls = parts[0], parts[1]
        if frame_id is None:
            frame_id = fid
        elif fid != frame_id:
            raise FormatError(f"{path}:{lineno}: mixed frame ids {frame_id!r}/{fid!r}")
        score, cx, cy, cz, l, w, h, yaw = (float(v) for v in parts[2:])
        boxes.append(
            Box3D(cx, cy, cz, l, w, h, yaw, class_id=class_id(cls), score=score)
        )
    if frame_id is None:
        raise FormatError(f"{path}: empty detection file has no frame id")
    return frame_id, boxes


def write_detection_dir(outdir, frames: dict[str, list[Box3D]]) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    for fid, boxes in sorted(frames.items()):
        write_detections(outdir / f"{fid}.det", fid, boxes)


def read_detection_dir(indir) -> dict[str, list[Box3D]]:
    frames = {}
    for path in sorted(Path(indir).glob("*.det")):
        try:
            fid, boxes = read_detections(path)
        except FormatError:
            # empty frame file: fall back to the stem as the frame id
            if path.read_text().strip() == "":
                frames[path.stem] = []
                continue
            raise
        frames[fid] = boxes
    return frames


# ---- strict config loading --------------------------------------------------

def check_known_keys(d: dict, allowed, context: str) -> None:
    unknown = set(d) - set(allowed)
    if unknown:
        raise FormatError(f"unknown keys in {context}: {sorted(unknown)}")
