"""Synthetic scene generation, oracle/noisy detector stand-ins for the
trained network, and the end-to-end pipeline runner."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ensemble, heads, io, metrics
from .cloud import (
    Box2D,
    CameraModel,
    PaintSource,
    PointCloud,
    Sweep,
    filter_range,
    densify,
    paint,
)
from .geom import (
    Box3D,
    InvalidParameterError,
    RigidTransform,
    TransformParams,
    bev_iou,
    points_in_box,
    wrap_angle,
    CLASS_NAMES,
    NUM_CLASSES,
    DIFFICULTY_L1,
    DIFFICULTY_L2,
)
from .voxel import VoxelGridSpec, to_bev, voxelize


class GenerationError(RuntimeError):
    pass


class PipelineError(RuntimeError):
    pass


# means (l, w, h) per class; plausible priors for synthetic data only
DEFAULT_BOX_SIZES = ((4.7, 2.1, 1.7), (0.9, 0.9, 1.7), (1.8, 0.8, 1.7))
SPARSE_POINT_LIMIT = 5  # boxes with at most this many points are labelled L2


@dataclass(frozen=True)
class SceneSpec:
    counts: tuple = (5, 3, 2)  # vehicles, pedestrians, cyclists
    box_size_means: tuple = DEFAULT_BOX_SIZES
    size_jitter: float = 0.2  # uniform +-20% on each dim
    placement_range: tuple = ((-38.0, 38.0), (-38.0, 38.0))
    min_box_gap: float = 1.0  # meters of BEV clearance between boxes
    points_per_box: int = 60
    clutter_points: int = 200
    num_past_sweeps: int = 4
    sweep_rate_hz: float = 10.0
    ego_velocity: tuple = (2.0, 0.0, 0.0)  # m/s, constant
    max_place_attempts: int = 200

    def __post_init__(self):
        if any(n < 0 for n in self.counts):
            raise InvalidParameterError("class counts must be >= 0")
        if self.points_per_box < 0 or self.clutter_points < 0:
            raise InvalidParameterError("point counts must be >= 0")
        if self.sweep_rate_hz <= 0:
            raise InvalidParameterError("sweep rate must be positive")


@dataclass(frozen=True)
class Scene:
    frame_id: str
    sweeps: list  # past sweeps oldest -> newest
    current: Sweep
    gt_boxes: list
    cameras: list
    paint_sources: list


@dataclass(frozen=True)
class SimFrame:
    """What a stand-in detector sees: the processed cloud plus the frame's
    ground truth (the oracle's substitute for learned weights)."""

    frame_id: str
    points: PointCloud
    gt_boxes: tuple

    def __post_init__(self):
        object.__setattr__(self, "gt_boxes", tuple(self.gt_boxes))


def transform_sim_frame(params: TransformParams, frame: SimFrame) -> SimFrame:
    affine = params.compile()
    return SimFrame(
        frame.frame_id,
        frame.points.with_xyz(affine.apply_points(frame.points.xyz)),
        tuple(affine.apply_box(b) for b in frame.gt_boxes),
    )


def _sample_boxes(spec: SceneSpec, rng: np.random.Generator) -> list:
    boxes = []
    (x0, x1), (y0, y1) = spec.placement_range
    for cls in range(NUM_CLASSES):
        ml, mw, mh = spec.box_size_means[cls]
        for _ in range(spec.counts[cls]):
            for _attempt in range(spec.max_place_attempts):
                j = spec.size_jitter
                l = ml * rng.uniform(1 - j, 1 + j)
                w = mw * rng.uniform(1 - j, 1 + j)
                h = mh * rng.uniform(1 - j, 1 + j)
                cand = Box3D(
                    rng.uniform(x0, x1),
                    rng.uniform(y0, y1),
                    h / 2.0 + rng.uniform(0.0, 0.3),
                    l, w, h,
                    rng.uniform(-math.pi, math.pi),
                    class_id=cls,
                )
                inflated = replace(
                    cand, l=cand.l + spec.min_box_gap, w=cand.w + spec.min_box_gap
                )
                if all(
                    bev_iou(inflated, replace(b, l=b.l + spec.min_box_gap,
                                              w=b.w + spec.min_box_gap)) == 0.0
                    for b in boxes
                ):
                    boxes.append(cand)
                    break
            else:
                raise GenerationError(
                    f"could not place a {CLASS_NAMES[cls]} box after "
                    f"{spec.max_place_attempts} attempts"
                )
    return boxes


def _sample_frame_points(
    spec: SceneSpec, boxes: list, rng: np.random.Generator
) -> np.ndarray:
    """Uniform interior samples per box plus uniform clutter, current frame."""
    chunks = []
    for b in boxes:
        n = spec.points_per_box
        local = rng.uniform(-0.5, 0.5, size=(n, 3)) * np.array([b.l, b.w, b.h])
        c, s = math.cos(b.yaw), math.sin(b.yaw)
        world = np.empty_like(local)
        world[:, 0] = c * local[:, 0] - s * local[:, 1] + b.cx
        world[:, 1] = s * local[:, 0] + c * local[:, 1] + b.cy
        world[:, 2] = local[:, 2] + b.cz
        chunks.append(world)
    (x0, x1), (y0, y1) = spec.placement_range
    clutter = np.stack(
        [
            rng.uniform(x0, x1, spec.clutter_points),
            rng.uniform(y0, y1, spec.clutter_points),
            rng.uniform(-0.5, 2.5, spec.clutter_points),
        ],
        axis=1,
    )
    chunks.append(clutter)
    return np.concatenate(chunks, axis=0)


def _default_cameras() -> list:
    # forward and rear pinhole cameras; camera frame: x right, y down, z forward
    front_r = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    rear_r = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, -1.0], [-1.0, 0.0, 0.0]])
    intr = dict(fx=500.0, fy=500.0, cx=480.0, cy=270.0, width=960, height=540)
    return [
        CameraModel(extrinsic=RigidTransform(front_r, np.array([0.0, -1.6, 0.0])), **intr),
        CameraModel(extrinsic=RigidTransform(rear_r, np.array([0.0, -1.6, 0.0])), **intr),
    ]


def _box_corners_3d(b: Box3D) -> np.ndarray:
    c, s = math.cos(b.yaw), math.sin(b.yaw)
    signs = np.array(
        [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
        dtype=float,
    )
    local = 0.5 * signs * np.array([b.l, b.w, b.h])
    out = np.empty_like(local)
    out[:, 0] = c * local[:, 0] - s * local[:, 1] + b.cx
    out[:, 1] = s * local[:, 0] + c * local[:, 1] + b.cy
    out[:, 2] = local[:, 2] + b.cz
    return out


def _paint_sources_from_gt(cameras: list, boxes: list) -> list:
    """Project GT boxes into each camera to synthesize 2D paint boxes."""
    sources = []
    for cam in cameras:
        boxes2d = []
        for b in boxes:
            u, v, valid = cam.project(_box_corners_3d(b))
            if not valid.any():
                continue
            u, v = u[valid], v[valid]
            xmin = max(0.0, float(u.min()))
            xmax = min(float(cam.width), float(u.max()))
            ymin = max(0.0, float(v.min()))
            ymax = min(float(cam.height), float(v.max()))
            if xmin < xmax and ymin < ymax:
                boxes2d.append(Box2D(xmin, ymin, xmax, ymax, b.class_id, 1.0))
        sources.append(PaintSource(cam, tuple(boxes2d)))
    return sources


def generate_scene(
    spec: SceneSpec, seed: int, frame_id: str = "frame_000"
) -> Scene:
    """Deterministic synthetic scene: static boxes observed over
    num_past_sweeps + 1 sweeps from a constant-velocity ego."""
    rng = np.random.default_rng(seed)
    boxes = _sample_boxes(spec, rng)
    dt = 1.0 / spec.sweep_rate_hz
    n_sweeps = spec.num_past_sweeps + 1
    t_current = spec.num_past_sweeps * dt
    vel = np.array(spec.ego_velocity)

    # world frame = current vehicle frame shifted back by ego motion
    sweeps = []
    for i in range(n_sweeps):
        t = i * dt
        pose = RigidTransform(np.eye(3), vel * t)  # vehicle_i -> world
        pts_current_frame = _sample_frame_points(spec, boxes, rng)
        # scene is static in the current frame; express in sweep i's frame
        world = pts_current_frame + vel * t_current
        local = pose.inverse().apply(world)
        cloud = PointCloud.from_xyz(
            local, reflectance=rng.uniform(0.0, 1.0, len(local))
        )
        sweeps.append(Sweep(cloud, pose, t))

    # difficulty from observed density in the current sweep
    cur_pts = sweeps[-1].points.xyz
    labelled = []
    for b in boxes:
        n_inside = int(points_in_box(cur_pts, b).sum())
        difficulty = DIFFICULTY_L2 if n_inside <= SPARSE_POINT_LIMIT else DIFFICULTY_L1
        labelled.append(replace(b, difficulty=difficulty))

    cameras = _default_cameras()
    return Scene(
        frame_id=frame_id,
        sweeps=sweeps[:-1],
        current=sweeps[-1],
        gt_boxes=labelled,
        cameras=cameras,
        paint_sources=_paint_sources_from_gt(cameras, labelled),
    )


# ---- detector stand-ins -----------------------------------------------------

@dataclass(frozen=True)
class DetectorSpec:
    kind: str = "oracle"  # oracle | noisy | replay
    seed: int = 0
    center_sigma: float = 0.0
    size_sigma: float = 0.0
    yaw_sigma: float = 0.0
    score_jitter: float = 0.0
    drop_rate: float = 0.0
    spurious_rate: float = 0.0
    replay_dir: str = ""

    def __post_init__(self):
        if self.kind not in ("oracle", "noisy", "replay"):
            raise InvalidParameterError(f"unknown detector kind {self.kind!r}")
        if min(self.center_sigma, self.size_sigma, self.yaw_sigma, self.score_jitter) < 0:
            raise InvalidParameterError("noise sigmas must be >= 0")
        for rate in (self.drop_rate, self.spurious_rate):
            if not 0.0 <= rate <= 1.0:
                raise InvalidParameterError("rates must lie in [0,1]")


class OracleDetector:
    """Encodes the frame's ground truth into head maps and decodes it back;
    stands in for a trained network with near-perfect output."""

    def __init__(self, cfg: heads.TargetConfig, grid_dims: tuple):
        self.cfg = cfg
        self.grid_dims = grid_dims

    def __call__(self, frame: SimFrame) -> list:
        scored = [replace(b, score=1.0) for b in frame.gt_boxes]
        maps, _ = heads.encode_targets(scored, self.cfg, self.grid_dims)
        decoded = heads.decode(maps, self.cfg, score_threshold=0.5)
        # restore difficulty labels by matching back to GT
        out = []
        for det in decoded:
            best = max(frame.gt_boxes, key=lambda g: bev_iou(det, g), default=None)
            diff = best.difficulty if best is not None else DIFFICULTY_L2
            out.append(replace(det, difficulty=diff))
        return out


class NoisyDetector:
    """Ground truth plus Gaussian center/size/yaw noise, score jitter and
    drop/spurious rates. Draws noise sequentially from its own generator, so
    repeated runs over the same frame sequence are deterministic."""

    def __init__(self, spec: DetectorSpec, detection_range=((-80.0, 80.0), (-80.0, 80.0))):
        self.spec = spec
        self.range = detection_range
        self.rng = np.random.default_rng(spec.seed)

    def __call__(self, frame: SimFrame) -> list:
        s, rng = self.spec, self.rng
        out = []
        for b in frame.gt_boxes:
            if rng.random() < s.drop_rate:
                continue
            dims = np.array([b.l, b.w, b.h]) * np.exp(
                rng.normal(0.0, s.size_sigma, 3)
            )
            score = float(np.clip(1.0 - abs(rng.normal(0.0, s.score_jitter)), 0.05, 1.0))
            out.append(
                replace(
                    b,
                    cx=b.cx + rng.normal(0.0, s.center_sigma),
                    cy=b.cy + rng.normal(0.0, s.center_sigma),
                    cz=b.cz + rng.normal(0.0, s.center_sigma),
                    l=float(dims[0]), w=float(dims[1]), h=float(dims[2]),
                    yaw=wrap_angle(b.yaw + rng.normal(0.0, s.yaw_sigma)),
                    score=score,
                )
            )
        n_spurious = rng.binomial(max(1, len(frame.gt_boxes)), s.spurious_rate)
        (x0, x1), (y0, y1) = self.range
        for _ in range(n_spurious):
            out.append(
                Box3D(
                    rng.uniform(x0, x1), rng.uniform(y0, y1), 1.0,
                    4.0, 2.0, 1.6, rng.uniform(-math.pi, math.pi),
                    class_id=int(rng.integers(NUM_CLASSES)),
                    score=float(rng.uniform(0.05, 0.5)),
                )
            )
        return out


class ReplayDetector:
    """Replays detection-set files from a directory, keyed by frame id."""

    def __init__(self, directory):
        if not Path(directory).is_dir():
            raise InvalidParameterError(f"replay directory not found: {directory}")
        self.frames = io.read_detection_dir(directory)

    def __call__(self, frame: SimFrame) -> list:
        return list(self.frames.get(frame.frame_id, []))


def make_detector(spec: DetectorSpec, cfg: heads.TargetConfig, grid_dims: tuple):
    if spec.kind == "oracle":
        return OracleDetector(cfg, grid_dims)
    if spec.kind == "noisy":
        return NoisyDetector(spec)
    return ReplayDetector(spec.replay_dir)


# ---- plot export ------------------------------------------------------------

def export_bev_plot(path_prefix, points: PointCloud, boxes: list) -> None:
    """Plain numeric scatter/outline files plus a minimal SVG rendering."""
    prefix = Path(path_prefix)
    np.savetxt(prefix.with_suffix(".points.txt"), points.xyz[:, :2], fmt="%.4f")
    with open(prefix.with_suffix(".boxes.txt"), "w") as f:
        for b in boxes:
            corners = b.corners_bev()
            flat = " ".join(f"{v:.4f}" for v in corners.ravel())
            f.write(f"{CLASS_NAMES[b.class_id]} {b.score:.4f} {flat}\n")

    xy = points.xyz[:, :2]
    lo, hi = -80.0, 80.0
    scale = 800.0 / (hi - lo)

    def sx(x):
        return (x - lo) * scale

    def sy(y):
        return 800.0 - (y - lo) * scale

    parts = [
        '<svg xmlns="http://www.w3.org/2000/svg" width="800" height="800" '
        'viewBox="0 0 800 800"><rect width="800" height="800" fill="white"/>'
    ]
    for x, y in xy[:: max(1, len(xy) // 5000)]:
        parts.append(
            f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="0.8" fill="#888"/>'
        )
    colors = ("#d62728", "#2ca02c", "#1f77b4")
    for b in boxes:
        pts = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in b.corners_bev())
        parts.append(
            f'<polygon points="{pts}" fill="none" stroke="{colors[b.class_id]}" '
            'stroke-width="1.5"/>'
        )
    parts.append("</svg>")
    prefix.with_suffix(".svg").write_text("".join(parts))
