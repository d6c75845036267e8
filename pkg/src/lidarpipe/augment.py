"""Training-time augmentation: ground-truth sample database, paste-in
sampling and global geometric augmentation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import io
from .cloud import PointCloud
from .geom import (
    Box3D,
    InvalidParameterError,
    TransformParams,
    bev_iou,
    points_in_box,
    CLASS_NAMES,
    NUM_CLASSES,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GtEntry:
    box: Box3D
    points: PointCloud  # cropped to the box
    frame_id: str


@dataclass(frozen=True)
class GtDatabase:
    """Per-class pools of (box, cropped points) samples."""

    entries: dict  # class_id -> tuple[GtEntry]

    def __post_init__(self):
        fixed = {c: tuple(self.entries.get(c, ())) for c in range(NUM_CLASSES)}
        object.__setattr__(self, "entries", fixed)

    def size(self, cls: int) -> int:
        return len(self.entries[cls])


@dataclass(frozen=True)
class AugmentConfig:
    samples_per_class: tuple = (6, 8, 10)  # vehicle, pedestrian, cyclist
    flip_probability: float = 0.5
    rotation_range: tuple = (-math.pi / 4, math.pi / 4)
    scale_range: tuple = (0.95, 1.05)
    translation_range: float = 0.2  # per axis, U(-t, t)
    seed: int = 0

    def __post_init__(self):
        if any(n < 0 for n in self.samples_per_class):
            raise InvalidParameterError("sample counts must be >= 0")
        for lo, hi in (self.rotation_range, self.scale_range):
            if lo > hi:
                raise InvalidParameterError(f"ill-ordered range ({lo}, {hi})")
        if self.translation_range < 0:
            raise InvalidParameterError("translation range must be >= 0")


def build_gt_database(frames: list[tuple]) -> GtDatabase:
    """frames: list of (frame_id, PointCloud, list[Box3D]).

    Crops each GT box's interior points; boxes with no interior points keep
    an empty point list.
    """
    pools = {c: [] for c in range(NUM_CLASSES)}
    for frame_id, points, boxes in frames:
        for box in boxes:
            mask = points_in_box(points.xyz, box)
            cropped = PointCloud(points.data[mask], points.num_paint_classes)
            pools[box.class_id].append(GtEntry(box, cropped, frame_id))
    return GtDatabase(pools)


def sample_paste(
    points: PointCloud,
    boxes: list[Box3D],
    db: GtDatabase,
    cfg: AugmentConfig,
    rng: np.random.Generator,
) -> tuple[PointCloud, list[Box3D]]:
    """Paste up to the configured per-class sample counts into the frame.

    Candidates are drawn uniformly without replacement within the frame and
    rejected if their box footprint overlaps (BEV IoU > 0) any existing or
    already-placed box.
    """
    placed_boxes = list(boxes)
    chunks = [points.data]
    for cls in range(NUM_CLASSES):
        want = cfg.samples_per_class[cls]
        pool = db.entries[cls]
        if want == 0 or not pool:
            continue
        got = 0
        for idx in rng.permutation(len(pool)):
            if got == want:
                break
            entry = pool[idx]
            if any(bev_iou(entry.box, other) > 0 for other in placed_boxes):
                continue
            placed_boxes.append(entry.box)
            chunks.append(entry.points.data)
            got += 1
        if got < want:
            log.info(
                "sample_paste: placed %d/%d %s samples", got, want, CLASS_NAMES[cls]
            )
    return PointCloud(np.concatenate(chunks, axis=0), points.num_paint_classes), placed_boxes


def global_augment(
    points: PointCloud,
    boxes: list[Box3D],
    cfg: AugmentConfig,
    rng: np.random.Generator,
) -> tuple[PointCloud, list[Box3D], TransformParams]:
    """Sample one flip/rotation/scale/translation tuple and apply it to the
    whole scene. Returns the applied parameters for reproducibility."""
    t = cfg.translation_range
    params = TransformParams(
        flip_y=bool(rng.random() < cfg.flip_probability),
        yaw=float(rng.uniform(*cfg.rotation_range)),
        scale=float(rng.uniform(*cfg.scale_range)),
        tx=float(rng.uniform(-t, t)),
        ty=float(rng.uniform(-t, t)),
        tz=float(rng.uniform(-t, t)),
    )
    affine = params.compile()
    out_points = points.with_xyz(affine.apply_points(points.xyz))
    out_boxes = [affine.apply_box(b) for b in boxes]
    return out_points, out_boxes, params


# ---- persistence ------------------------------------------------------------

def save_gt_database(db: GtDatabase, outdir) -> None:
    """Directory layout: index.yaml plus one frame-format file per entry."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    index = []
    n = 0
    for cls in range(NUM_CLASSES):
        for entry in db.entries[cls]:
            rel = f"entry_{n:06d}.pcf"
            io.write_frame(outdir / rel, entry.points)
            b = entry.box
            index.append(
                {
                    "class": CLASS_NAMES[cls],
                    "box": [b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw],
                    "score": b.score,
                    "difficulty": b.difficulty,
                    "num_points": len(entry.points),
                    "path": rel,
                    "frame_id": entry.frame_id,
                }
            )
            n += 1
    io.write_yaml(outdir / "index.yaml", {"entries": index})


def load_gt_database(indir) -> GtDatabase:
    indir = Path(indir)
    index = io.read_yaml(indir / "index.yaml")
    pools = {c: [] for c in range(NUM_CLASSES)}
    for rec in index["entries"]:
        cls = CLASS_NAMES.index(rec["class"])
        cx, cy, cz, l, w, h, yaw = rec["box"]
        box = Box3D(
            cx, cy, cz, l, w, h, yaw,
            class_id=cls, score=rec["score"], difficulty=rec["difficulty"],
        )
        points = io.read_frame(indir / rec["path"])
        if len(points) != rec["num_points"]:
            raise io.FormatError(
                f"{rec['path']}: index says {rec['num_points']} points, "
                f"file has {len(points)}"
            )
        pools[cls].append(GtEntry(box, points, rec["frame_id"]))
    return GtDatabase(pools)
