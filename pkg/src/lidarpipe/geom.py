"""Rigid transforms, oriented-box geometry and rotated BEV IoU.

Everything here is pure and operates on immutable inputs; the rest of the
pipeline is built on these primitives.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

VEHICLE = 0
PEDESTRIAN = 1
CYCLIST = 2
CLASS_NAMES = ("vehicle", "pedestrian", "cyclist")
NUM_CLASSES = 3

DIFFICULTY_L1 = 1
DIFFICULTY_L2 = 2

TWO_PI = 2.0 * math.pi


class InvalidParameterError(ValueError):
    pass


def class_id(name: str) -> int:
    try:
        return CLASS_NAMES.index(name.lower())
    except ValueError:
        raise InvalidParameterError(f"unknown class name: {name!r}") from None


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    return -((-a + math.pi) % TWO_PI - math.pi)


@dataclass(frozen=True)
class Box3D:
    """7-DoF gravity-aligned box: center, length/width/height, heading."""

    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float
    class_id: int = VEHICLE
    score: float = 1.0
    difficulty: int = DIFFICULTY_L2

    def __post_init__(self):
        if self.l <= 0 or self.w <= 0 or self.h <= 0:
            raise InvalidParameterError(
                f"box dims must be positive, got l={self.l} w={self.w} h={self.h}"
            )
        if not 0.0 <= self.score <= 1.0:
            raise InvalidParameterError(f"score must lie in [0,1], got {self.score}")
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    def corners_bev(self) -> np.ndarray:
        """4x2 footprint corners (counter-clockwise)."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = 0.5 * self.l, 0.5 * self.w
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.cx, self.cy])


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) transform: y = R x + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9):
            raise InvalidParameterError("rotation is not orthonormal")
        if not math.isclose(float(np.linalg.det(r)), 1.0, abs_tol=1e-9):
            raise InvalidParameterError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def from_yaw_translation(yaw: float, translation) -> "RigidTransform":
        c, s = math.cos(yaw), math.sin(yaw)
        r = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return RigidTransform(r, np.asarray(translation, dtype=float))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self @ other)(x) = self(other(x))."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation


def _rot_zyx(yaw: float, pitch: float, roll: float) -> np.ndarray:
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
    return rz @ ry @ rx


@dataclass(frozen=True)
class TransformParams:
    """Augmentation family: flip, then Rz(yaw)*Ry(pitch)*Rx(roll), then
    uniform scale, then translation.

    tx/ty are used by training-time global augmentation only; test-time
    augmentation translates along z alone.
    """

    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0
    scale: float = 1.0
    tz: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    flip_y: bool = False

    def __post_init__(self):
        if self.scale <= 0:
            raise InvalidParameterError(f"scale must be positive, got {self.scale}")

    def compile(self) -> "AffineTransform":
        flip = np.diag([1.0, -1.0, 1.0]) if self.flip_y else np.eye(3)
        matrix = self.scale * _rot_zyx(self.yaw, self.pitch, self.roll) @ flip
        translation = np.array([self.tx, self.ty, self.tz])
        yaw_sign = -1.0 if self.flip_y else 1.0
        return AffineTransform(matrix, translation, self.yaw, yaw_sign, self.scale)


@dataclass(frozen=True)
class AffineTransform:
    """Compiled point/box action of a TransformParams, closed under inversion.

    Points map as M x + t. Boxes stay gravity-aligned: the center maps as a
    point, yaw maps as yaw_sign * yaw + yaw_delta, dims scale by dim_scale.
    """

    matrix: np.ndarray
    translation: np.ndarray
    yaw_delta: float
    yaw_sign: float
    dim_scale: float

    @staticmethod
    def identity() -> "AffineTransform":
        return AffineTransform(np.eye(3), np.zeros(3), 0.0, 1.0, 1.0)

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return pts @ self.matrix.T + self.translation

    def apply_box(self, b: Box3D) -> Box3D:
        center = self.apply_points(np.array([b.cx, b.cy, b.cz]))
        s = self.dim_scale
        return replace(
            b,
            cx=float(center[0]),
            cy=float(center[1]),
            cz=float(center[2]),
            l=b.l * s,
            w=b.w * s,
            h=b.h * s,
            yaw=wrap_angle(self.yaw_sign * b.yaw + self.yaw_delta),
        )

    def inverse(self) -> "AffineTransform":
        inv = np.linalg.inv(self.matrix)
        return AffineTransform(
            inv,
            -inv @ self.translation,
            -self.yaw_sign * self.yaw_delta,
            self.yaw_sign,
            1.0 / self.dim_scale,
        )


def _as_affine(t) -> AffineTransform:
    return t.compile() if isinstance(t, TransformParams) else t


def apply_to_point(t, p) -> np.ndarray:
    return _as_affine(t).apply_points(p)


def apply_to_box(t, b: Box3D) -> Box3D:
    return _as_affine(t).apply_box(b)


def invert(t) -> AffineTransform:
    return _as_affine(t).inverse()


# ---- rotated BEV IoU --------------------------------------------------------

_DEGENERATE_AREA = 1e-12


def _polygon_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip_polygon(subject: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Clip subject polygon by the half-plane left of directed edge a->b."""
    edge = b - a
    out = []
    n = len(subject)
    for i in range(n):
        p, q = subject[i], subject[(i + 1) % n]
        # cross > 0 means the vertex is on the kept side
        cp = edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0])
        cq = edge[0] * (q[1] - a[1]) - edge[1] * (q[0] - a[0])
        if cp >= 0:
            out.append(p)
        if (cp > 0) != (cq > 0) and cp != cq:
            t = cp / (cp - cq)
            out.append(p + t * (q - p))
    return np.array(out) if out else np.empty((0, 2))


def convex_intersection_area(poly_a: np.ndarray, poly_b: np.ndarray) -> float:
    """Area of the intersection of two convex CCW polygons (Sutherland-Hodgman)."""
    clipped = poly_a
    nb = len(poly_b)
    for i in range(nb):
        if len(clipped) < 3:
            return 0.0
        clipped = _clip_polygon(clipped, poly_b[i], poly_b[(i + 1) % nb])
    if len(clipped) < 3:
        return 0.0
    return _polygon_area(clipped)


def bev_iou(a: Box3D, b: Box3D) -> float:
    """IoU of the yaw-rotated l x w footprints in the x-y plane."""
    if a is b or (
        a.cx == b.cx and a.cy == b.cy and a.l == b.l and a.w == b.w and a.yaw == b.yaw
    ):
        return 1.0
    # cheap reject on circumscribed circles
    ra = 0.5 * math.hypot(a.l, a.w)
    rb = 0.5 * math.hypot(b.l, b.w)
    if math.hypot(a.cx - b.cx, a.cy - b.cy) > ra + rb:
        return 0.0
    # canonical operand order keeps the clipping rounding identical both
    # ways, so bev_iou(a, b) == bev_iou(b, a) bitwise
    if (b.cx, b.cy, b.l, b.w, b.yaw) < (a.cx, a.cy, a.l, a.w, a.yaw):
        a, b = b, a
    inter = convex_intersection_area(a.corners_bev(), b.corners_bev())
    if inter < _DEGENERATE_AREA:
        return 0.0
    union = a.l * a.w + b.l * b.w - inter
    if union < _DEGENERATE_AREA:
        return 0.0
    return inter / union


def points_in_box(points: np.ndarray, b: Box3D) -> np.ndarray:
    """Boolean membership mask: inside the box after rotating into box frame."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    d = pts - np.array([b.cx, b.cy, b.cz])
    c, s = math.cos(-b.yaw), math.sin(-b.yaw)
    lx = c * d[:, 0] - s * d[:, 1]
    ly = s * d[:, 0] + c * d[:, 1]
    return (
        (np.abs(lx) <= 0.5 * b.l)
        & (np.abs(ly) <= 0.5 * b.w)
        & (np.abs(d[:, 2]) <= 0.5 * b.h)
    )
