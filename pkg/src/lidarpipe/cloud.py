"""Point-cloud data model, multi-sweep densification, camera painting and
range filtering.

A frame's points live in a single float32 array with columns
(x, y, z, reflectance, painted[0..K), dt). K is the number of paint-class
channels, 3 by default.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geom import InvalidParameterError, RigidTransform

DEFAULT_PAINT_CLASSES = 3

TRAIN_RANGE = ((-76.8, 76.8), (-51.2, 51.2), (-1.0, 3.0))
INFERENCE_RANGE = ((-80.0, 80.0), (-80.0, 80.0), (-1.0, 3.0))


class SequencingError(RuntimeError):
    pass


class ConfigurationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PointCloud:
    """N x (5 + K) float32 array of painted points."""

    data: np.ndarray
    num_paint_classes: int = DEFAULT_PAINT_CLASSES

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        width = 5 + self.num_paint_classes
        if arr.ndim != 2 or arr.shape[1] != width:
            raise ConfigurationError(
                f"expected point array of width {width}, got shape {arr.shape}"
            )
        object.__setattr__(self, "data", arr)

    @staticmethod
    def empty(num_paint_classes: int = DEFAULT_PAINT_CLASSES) -> "PointCloud":
        return PointCloud(
            np.empty((0, 5 + num_paint_classes), dtype=np.float32), num_paint_classes
        )

    @staticmethod
    def from_xyz(
        xyz: np.ndarray,
        reflectance=None,
        num_paint_classes: int = DEFAULT_PAINT_CLASSES,
    ) -> "PointCloud":
        xyz = np.asarray(xyz, dtype=np.float32).reshape(-1, 3)
        n = len(xyz)
        data = np.zeros((n, 5 + num_paint_classes), dtype=np.float32)
        data[:, :3] = xyz
        if reflectance is not None:
            data[:, 3] = reflectance
        return PointCloud(data, num_paint_classes)

    def __len__(self) -> int:
        return len(self.data)

    @property
    def xyz(self) -> np.ndarray:
        return self.data[:, :3]

    @property
    def reflectance(self) -> np.ndarray:
        return self.data[:, 3]

    @property
    def painted(self) -> np.ndarray:
        return self.data[:, 4 : 4 + self.num_paint_classes]

    @property
    def dt(self) -> np.ndarray:
        return self.data[:, -1]

    def with_xyz(self, xyz: np.ndarray) -> "PointCloud":
        out = self.data.copy()
        out[:, :3] = np.asarray(xyz, dtype=np.float32)
        return PointCloud(out, self.num_paint_classes)


@dataclass(frozen=True)
class Sweep:
    points: PointCloud
    pose: RigidTransform  # vehicle -> world
    timestamp: float


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: u = fx*Xc/Zc + cx, v = fy*Yc/Zc + cy, Zc forward."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsic: RigidTransform  # vehicle -> camera

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidParameterError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise InvalidParameterError("image dims must be positive")

    def project(self, points: np.ndarray):
        """Returns (u, v, valid); valid requires Zc > 0 and (u,v) in bounds."""
        cam = self.extrinsic.apply(points)
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * cam[:, 0] / z + self.cx
            v = self.fy * cam[:, 1] / z + self.cy
        valid = (z > 0) & (u >= 0) & (u < self.width) & (v >= 0) & (v < self.height)
        return u, v, valid


@dataclass(frozen=True)
class Box2D:
    xmin: float
    ymin: float
    xmax: float
    ymax: float
    class_id: int
    score: float = 1.0

    def __post_init__(self):
        if not (self.xmin < self.xmax and self.ymin < self.ymax):
            raise InvalidParameterError("2D box must have positive extent")
        if not 0.0 <= self.score <= 1.0:
            raise InvalidParameterError("2D box score must lie in [0,1]")


@dataclass(frozen=True)
class PaintSource:
    """Per-camera paint input: either 2D boxes or a dense label image.

    label_image holds a per-pixel class index, -1 for background.
    """

    camera: CameraModel
    boxes: tuple = ()
    label_image: np.ndarray | None = None

    def __post_init__(self):
        if self.label_image is not None:
            img = np.asarray(self.label_image)
            if img.shape != (self.camera.height, self.camera.width):
                raise ConfigurationError(
                    f"label image shape {img.shape} does not match camera "
                    f"({self.camera.height}, {self.camera.width})"
                )
            object.__setattr__(self, "label_image", img)
        object.__setattr__(self, "boxes", tuple(self.boxes))


def densify(current: Sweep, past: list[Sweep]) -> PointCloud:
    """Accumulate past sweeps into the current vehicle frame, stamping dt.

    Past sweeps must be ordered oldest -> newest and strictly precede the
    current sweep. Output order is past sweeps (oldest first) then current.
    """
    times = [s.timestamp for s in past] + [current.timestamp]
    if any(t1 >= t2 for t1, t2 in zip(times, times[1:])):
        raise SequencingError(f"timestamps must strictly increase, got {times}")
    k = current.points.num_paint_classes
    world_to_current = current.pose.inverse()
    chunks = []
    for sweep in past:
        if sweep.points.num_paint_classes != k:
            raise ConfigurationError("paint channel count differs across sweeps")
        data = sweep.points.data.copy()
        if len(data):
            rel = world_to_current.compose(sweep.pose)
            data[:, :3] = rel.apply(sweep.points.xyz).astype(np.float32)
        data[:, -1] = np.float32(current.timestamp - sweep.timestamp)
        chunks.append(data)
    cur = current.points.data.copy()
    cur[:, -1] = 0.0
    chunks.append(cur)
    return PointCloud(np.concatenate(chunks, axis=0), k)


def paint(
    points: PointCloud, sources: list[PaintSource], binary_scores: bool = False
) -> PointCloud:
    """Append per-class image evidence to every projectable point.

    Box sources contribute the enclosing box's score to its class channel
    (1.0 when binary_scores is set); segmentation sources contribute 1.0 in
    the pixel's class channel. Overlaps and multi-camera visibility resolve
    channel-wise by max. Only the painted channels change.
    """
    k = points.num_paint_classes
    data = points.data.copy()
    scores = np.zeros((len(data), k), dtype=np.float32)
    xyz = points.xyz.astype(float)
    for src in sources:
        u, v, valid = src.camera.project(xyz)
        if not valid.any():
            continue
        for box in src.boxes:
            if box.class_id >= k:
                raise ConfigurationError(
                    f"paint class {box.class_id} exceeds channel count {k}"
                )
            hit = (
                valid
                & (u >= box.xmin)
                & (u <= box.xmax)
                & (v >= box.ymin)
                & (v <= box.ymax)
            )
            val = 1.0 if binary_scores else box.score
            np.maximum(scores[:, box.class_id], np.where(hit, val, 0.0), out=scores[:, box.class_id])
        if src.label_image is not None:
            idx = np.flatnonzero(valid)
            px = np.floor(u[idx]).astype(int)
            py = np.floor(v[idx]).astype(int)
            labels = src.label_image[py, px]
            hit = labels >= 0
            if np.any(labels >= k):
                raise ConfigurationError("label image class exceeds channel count")
            scores[idx[hit], labels[hit]] = np.maximum(
                scores[idx[hit], labels[hit]], 1.0
            )
    data[:, 4 : 4 + k] = np.maximum(data[:, 4 : 4 + k], scores)
    return PointCloud(data, k)


def filter_range(points: PointCloud, x_range, y_range, z_range) -> PointCloud:
    """Keep points within the half-open box [x0,x1) x [y0,y1) x [z0,z1)."""
    for lo, hi in (x_range, y_range, z_range):
        if not lo < hi:
            raise InvalidParameterError(f"inverted range ({lo}, {hi})")
    xyz = points.xyz
    keep = (
        (xyz[:, 0] >= x_range[0])
        & (xyz[:, 0] < x_range[1])
        & (xyz[:, 1] >= y_range[0])
        & (xyz[:, 1] < y_range[1])
        & (xyz[:, 2] >= z_range[0])
        & (xyz[:, 2] < z_range[1])
    )
    return PointCloud(points.data[keep], points.num_paint_classes)
