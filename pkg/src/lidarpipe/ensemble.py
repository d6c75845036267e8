"""Test-time augmentation orchestration, 3D weighted boxes fusion with BEV
IoU, and the naive grid search over fusion thresholds."""
from __future__ import annotations

import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .geom import (
    Box3D,
    InvalidParameterError,
    TransformParams,
    bev_iou,
    invert,
    NUM_CLASSES,
    CLASS_NAMES,
    wrap_angle,
)


class DetectorError(RuntimeError):
    pass


@dataclass(frozen=True)
class ClassThresholds:
    iou: float  # box-associating IoU threshold
    skip_pre: float  # pre-fusion score skip
    skip_post: float  # post-fusion score skip

    def __post_init__(self):
        if not 0.0 < self.iou <= 1.0:
            raise InvalidParameterError(f"iou threshold must lie in (0,1], got {self.iou}")
        for v in (self.skip_pre, self.skip_post):
            if not 0.0 <= v <= 1.0:
                raise InvalidParameterError(f"skip threshold must lie in [0,1], got {v}")


@dataclass(frozen=True)
class FusionThresholds:
    per_class: tuple  # ClassThresholds per class id

    def __post_init__(self):
        if len(self.per_class) != NUM_CLASSES:
            raise InvalidParameterError(
                f"need thresholds for all {NUM_CLASSES} classes"
            )
        object.__setattr__(self, "per_class", tuple(self.per_class))

    def for_class(self, cls: int) -> ClassThresholds:
        return self.per_class[cls]


def submission_thresholds_3d() -> FusionThresholds:
    """Per-class triples shipped for the 3D detection preset."""
    return FusionThresholds(
        (
            ClassThresholds(0.80, 0.10, 0.03),  # vehicle
            ClassThresholds(0.70, 0.15, 0.03),  # pedestrian
            ClassThresholds(0.65, 0.25, 0.03),  # cyclist
        )
    )


def submission_thresholds_domain_adaptation() -> FusionThresholds:
    """Per-class triples shipped for the domain adaptation preset."""
    return FusionThresholds(
        (
            ClassThresholds(0.80, 0.10, 0.05),
            ClassThresholds(0.70, 0.15, 0.05),
            ClassThresholds(0.65, 0.25, 0.05),
        )
    )


def thresholds_to_dict(thr: FusionThresholds) -> dict:
    return {
        CLASS_NAMES[c]: {
            "iou": thr.per_class[c].iou,
            "skip_pre": thr.per_class[c].skip_pre,
            "skip_post": thr.per_class[c].skip_post,
        }
        for c in range(NUM_CLASSES)
    }


def thresholds_from_dict(d: dict) -> FusionThresholds:
    per = []
    for name in CLASS_NAMES:
        rec = d[name]
        per.append(ClassThresholds(rec["iou"], rec["skip_pre"], rec["skip_post"]))
    return FusionThresholds(tuple(per))


# ---- weighted boxes fusion --------------------------------------------------

@dataclass
class _Cluster:
    boxes: list
    weights: list
    models: set

    def fused(self) -> Box3D:
        scores = np.array([b.score * w for b, w in zip(self.boxes, self.weights)])
        total = scores.sum()
        geo = np.array(
            [[b.cx, b.cy, b.cz, b.l, b.w, b.h] for b in self.boxes]
        )
        cx, cy, cz, l, w, h = (scores @ geo) / total
        sin = sum(s * math.sin(b.yaw) for s, b in zip(scores, self.boxes))
        cos = sum(s * math.cos(b.yaw) for s, b in zip(scores, self.boxes))
        yaw = math.atan2(sin, cos)
        first = self.boxes[0]
        return Box3D(
            cx, cy, cz, l, w, h, yaw,
            class_id=first.class_id,
            score=float(total / sum(self.weights)),
            difficulty=first.difficulty,
        )


def wbf_fuse(
    sets: list[list[Box3D]],
    thresholds: FusionThresholds,
    model_weights=None,
    score_scaling: bool = True,
) -> list[Box3D]:
    """Fuse per-model detection lists for one frame.

    Per class: drop boxes below the pre-fusion skip threshold, walk the rest
    in descending score, and greedily join the first cluster whose running
    fused box overlaps at the class IoU threshold (else start a new one).
    Cluster geometry is the score-weighted mean (vector mean for yaw); the
    fused score is the weighted member mean scaled by min(n_members, T)/T
    with T the number of input sets, then cut at the post-fusion skip
    threshold. Output is sorted by descending score.
    """
    t_models = len(sets)
    if t_models == 0:
        return []
    if model_weights is None:
        model_weights = [1.0] * t_models
    if len(model_weights) != t_models:
        raise InvalidParameterError("one weight per input set required")

    out = []
    for cls in range(NUM_CLASSES):
        thr = thresholds.for_class(cls)
        members = []
        for model, det in enumerate(sets):
            for box in det:
                if box.class_id == cls and box.score >= thr.skip_pre:
                    members.append((box, model))
        members.sort(key=lambda bm: -bm[0].score)

        clusters: list[_Cluster] = []
        fused_boxes: list[Box3D] = []
        for box, model in members:
            for i, cluster in enumerate(clusters):
                if bev_iou(box, fused_boxes[i]) >= thr.iou:
                    cluster.boxes.append(box)
                    cluster.weights.append(model_weights[model])
                    cluster.models.add(model)
                    fused_boxes[i] = cluster.fused()
                    break
            else:
                cluster = _Cluster([box], [model_weights[model]], {model})
                clusters.append(cluster)
                fused_boxes.append(cluster.fused())

        for cluster, fused in zip(clusters, fused_boxes):
            score = fused.score
            if score_scaling:
                score *= min(len(cluster.boxes), t_models) / t_models
            if score >= thr.skip_post:
                out.append(replace(fused, score=score))
    out.sort(key=lambda b: -b.score)
    return out


# ---- test-time augmentation -------------------------------------------------

DEFAULT_YAW_SET_DEG = (
    0.0, 22.5, -22.5, 45.0, -45.0, 67.5, -67.5, 90.0, -90.0,
    112.5, -112.5, 135.0, -135.0, 157.5, -157.5, 180.0,
)
HALF_DEG = math.radians(0.5)


@dataclass(frozen=True)
class TtaPlan:
    transforms: tuple  # TransformParams, identity included

    def __post_init__(self):
        object.__setattr__(self, "transforms", tuple(self.transforms))
        if not any(_is_identity(t) for t in self.transforms):
            raise InvalidParameterError("plan must contain the identity transform")

    def __len__(self) -> int:
        return len(self.transforms)


def _is_identity(t: TransformParams) -> bool:
    return (
        t.yaw == t.pitch == t.roll == t.tx == t.ty == t.tz == 0.0
        and t.scale == 1.0
        and not t.flip_y
    )


def identity_plan() -> TtaPlan:
    return TtaPlan((TransformParams(),))


def default_plan() -> TtaPlan:
    """Yaw sweep at 22.5 deg steps crossed with each other augmentation
    family (pitch, roll, scale, z-translation) one at a time."""
    yaws = [math.radians(d) for d in DEFAULT_YAW_SET_DEG]
    families = (
        [{}]
        + [{"pitch": s * HALF_DEG} for s in (+1, -1)]
        + [{"roll": s * HALF_DEG} for s in (+1, -1)]
        + [{"scale": s} for s in (0.95, 1.05)]
        + [{"tz": s * 0.2} for s in (+1, -1)]
    )
    transforms = [
        TransformParams(yaw=y, **extra) for extra, y in itertools.product(families, yaws)
    ]
    return TtaPlan(tuple(transforms))


def transform_points_frame(params: TransformParams, points: np.ndarray) -> np.ndarray:
    return params.compile().apply_points(points)


def run_tta(
    detect,
    frame,
    plan: TtaPlan,
    thresholds: FusionThresholds,
    transform_frame=transform_points_frame,
    score_scaling: bool = True,
) -> list[Box3D]:
    """Detect on every augmented copy of the frame, map each group of boxes
    back through the inverse transform, and fuse the groups with WBF
    (each transform counts as one model)."""
    groups = []
    for params in plan.transforms:
        try:
            boxes = detect(transform_frame(params, frame))
        except Exception as exc:  # noqa: BLE001 - reframe with the failing transform
            raise DetectorError(f"detector failed under transform {params}") from exc
        inv = invert(params)
        groups.append([inv.apply_box(b) for b in boxes])
    return wbf_fuse(groups, thresholds, score_scaling=score_scaling)


# ---- naive grid search ------------------------------------------------------

@dataclass(frozen=True)
class GridSearchSpec:
    iou_range: tuple = (0.40, 0.80)
    iou_step: float = 0.05
    skip_pre_range: tuple = (0.00, 0.25)
    skip_pre_step: float = 0.05
    skip_post_range: tuple = (0.01, 0.20)
    skip_post_step: float = 0.01

    def _axis(self, rng, step):
        lo, hi = rng
        n = int(round((hi - lo) / step)) + 1
        return [round(lo + i * step, 10) for i in range(n)]

    def lattice(self) -> list[tuple]:
        """All (iou, skip_pre, skip_post) triples, in axis order."""
        return list(
            itertools.product(
                self._axis(self.iou_range, self.iou_step),
                self._axis(self.skip_pre_range, self.skip_pre_step),
                self._axis(self.skip_post_range, self.skip_post_step),
            )
        )


def grid_search(eval_fn, spec: GridSearchSpec = GridSearchSpec(), jobs: int = 1):
    """Exhaustively evaluate the threshold lattice for one class.

    eval_fn maps (iou, skip_pre, skip_post) to an objective (e.g. class
    APH). Returns (best_triple, trace) where trace lists (triple, value) in
    lattice order; ties break toward larger iou, then skip_pre, then
    skip_post.
    """
    points = spec.lattice()
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            values = list(pool.map(eval_fn, points, chunksize=32))
    else:
        values = [eval_fn(p) for p in points]
    trace = list(zip(points, values))
    best = max(trace, key=lambda pv: (pv[1], pv[0]))
    return best[0], trace
