"""Five-head target encoding, the combined detection loss, and NMS-free
decoding via 3x3 max-pool peak extraction.

Head layout per BEV cell: class heatmap (C channels, [0,1]), sub-cell x-y
offset (2), z location (1), box size l/w/h (3), and MultiBin orientation
(2 bins x 2 classification logits + 2 bins x sin/cos residual).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import maximum_filter

from .geom import Box3D, InvalidParameterError, NUM_CLASSES, wrap_angle

log = logging.getLogger(__name__)

NUM_ORI_BINS = 2
# bin 0 centered at 0 covers (-pi/2, pi/2]; bin 1 centered at pi covers the rest
ORI_BIN_CENTERS = (0.0, math.pi)

HEATMAP_EPS = 1e-4
MIN_BOX_DIM = 0.01


class ShapeMismatchError(RuntimeError):
    pass


@dataclass(frozen=True)
class TargetConfig:
    cell_size: float = 0.32  # meters per BEV cell (voxel size x downsample)
    x_min: float = -80.0
    y_min: float = -80.0
    offset_radius: int = 2  # r: offsets supervised on a (2r+1)^2 square
    max_objects: int = 300
    lambda_off: float = 1.0
    lambda_z: float = 1.5
    lambda_size: float = 0.3
    lambda_ori: float = 1.0
    focal_alpha: float = 2.0
    focal_beta: float = 4.0
    min_gauss_radius: int = 2
    gauss_sigma_scale: float = 1.0  # sigma = scale * (2*radius+1) / 6

    def __post_init__(self):
        if self.offset_radius < 0:
            raise InvalidParameterError("offset radius must be >= 0")
        if self.max_objects <= 0:
            raise InvalidParameterError("max objects must be positive")
        if min(self.lambda_off, self.lambda_z, self.lambda_size, self.lambda_ori) < 0:
            raise InvalidParameterError("loss weights must be >= 0")
        if self.cell_size <= 0:
            raise InvalidParameterError("cell size must be positive")


@dataclass(frozen=True)
class HeadMaps:
    heatmap: np.ndarray  # (nx, ny, C)
    offset: np.ndarray  # (nx, ny, 2)
    zmap: np.ndarray  # (nx, ny)
    size: np.ndarray  # (nx, ny, 3)
    ori_cls: np.ndarray  # (nx, ny, 2*NUM_ORI_BINS) per-bin (neg, pos) logits
    ori_off: np.ndarray  # (nx, ny, 2*NUM_ORI_BINS) per-bin (sin, cos) residual

    def __post_init__(self):
        nx, ny = self.heatmap.shape[:2]
        for name in ("offset", "zmap", "size", "ori_cls", "ori_off"):
            arr = getattr(self, name)
            if arr.shape[:2] != (nx, ny):
                raise ShapeMismatchError(
                    f"{name} grid {arr.shape[:2]} != heatmap grid {(nx, ny)}"
                )

    @property
    def grid_dims(self):
        return self.heatmap.shape[:2]


@dataclass(frozen=True)
class TargetMask:
    center: np.ndarray  # (nx, ny) bool: cells carrying z/size/ori targets
    offset: np.ndarray  # (nx, ny) bool: cells carrying offset targets


@dataclass(frozen=True)
class LossBreakdown:
    heat: float
    off: float
    z: float
    size: float
    ori: float
    total: float


def ori_bin_of(yaw: float) -> int:
    return 0 if -math.pi / 2 < yaw <= math.pi / 2 else 1


def empty_maps(nx: int, ny: int, num_classes: int = NUM_CLASSES) -> HeadMaps:
    return HeadMaps(
        heatmap=np.zeros((nx, ny, num_classes)),
        offset=np.zeros((nx, ny, 2)),
        zmap=np.zeros((nx, ny)),
        size=np.zeros((nx, ny, 3)),
        ori_cls=np.zeros((nx, ny, 2 * NUM_ORI_BINS)),
        ori_off=np.zeros((nx, ny, 2 * NUM_ORI_BINS)),
    )


def _gaussian_radius(box: Box3D, cfg: TargetConfig) -> int:
    footprint = max(box.l, box.w) / cfg.cell_size
    return max(cfg.min_gauss_radius, int(round(0.5 * footprint)))


def _splat_gaussian(channel: np.ndarray, ix: int, iy: int, radius: int, sigma: float):
    nx, ny = channel.shape
    x0, x1 = max(0, ix - radius), min(nx, ix + radius + 1)
    y0, y1 = max(0, iy - radius), min(ny, iy + radius + 1)
    gx = np.arange(x0, x1) - ix
    gy = np.arange(y0, y1) - iy
    g = np.exp(-(gx[:, None] ** 2 + gy[None, :] ** 2) / (2.0 * sigma**2))
    np.maximum(channel[x0:x1, y0:y1], g, out=channel[x0:x1, y0:y1])


def encode_targets(
    boxes: list[Box3D], cfg: TargetConfig, grid_dims: tuple
) -> tuple[HeadMaps, TargetMask]:
    """Render ground-truth boxes into the five head maps.

    Heatmap peaks are exactly 1.0 at each object's center cell with a
    Gaussian falloff merged across objects by elementwise max. Offsets are
    supervised on the (2r+1)^2 square around the center cell as the vector
    (in cells) from each cell's center to the true continuous center; where
    squares of nearby objects overlap, the nearest center wins, so each
    object's own center cell always carries its own offset. z, size and
    orientation are written at the center cell only.
    """
    nx, ny = grid_dims
    maps = empty_maps(nx, ny)
    mask = TargetMask(np.zeros((nx, ny), bool), np.zeros((nx, ny), bool))
    offset_dist = np.full((nx, ny), np.inf)
    if len(boxes) > cfg.max_objects:
        log.warning(
            "encode_targets: %d boxes exceed the %d-object budget, keeping the "
            "top ones by score then footprint",
            len(boxes),
            cfg.max_objects,
        )
        boxes = sorted(boxes, key=lambda b: (-b.score, -b.l * b.w))[: cfg.max_objects]
    r = cfg.offset_radius
    for box in boxes:
        fx = (box.cx - cfg.x_min) / cfg.cell_size
        fy = (box.cy - cfg.y_min) / cfg.cell_size
        ix, iy = int(math.floor(fx)), int(math.floor(fy))
        if not (0 <= ix < nx and 0 <= iy < ny):
            log.warning("encode_targets: box center (%g, %g) outside grid, skipped",
                        box.cx, box.cy)
            continue
        radius = _gaussian_radius(box, cfg)
        sigma = cfg.gauss_sigma_scale * (2 * radius + 1) / 6.0
        _splat_gaussian(maps.heatmap[:, :, box.class_id], ix, iy, radius, sigma)
        maps.heatmap[ix, iy, box.class_id] = 1.0

        x0, x1 = max(0, ix - r), min(nx, ix + r + 1)
        y0, y1 = max(0, iy - r), min(ny, iy + r + 1)
        off_x = (fx - (np.arange(x0, x1) + 0.5))[:, None]
        off_y = (fy - (np.arange(y0, y1) + 0.5))[None, :]
        dist = off_x**2 + off_y**2
        closer = dist < offset_dist[x0:x1, y0:y1]
        maps.offset[x0:x1, y0:y1, 0] = np.where(
            closer, np.broadcast_to(off_x, dist.shape), maps.offset[x0:x1, y0:y1, 0]
        )
        maps.offset[x0:x1, y0:y1, 1] = np.where(
            closer, np.broadcast_to(off_y, dist.shape), maps.offset[x0:x1, y0:y1, 1]
        )
        offset_dist[x0:x1, y0:y1] = np.minimum(offset_dist[x0:x1, y0:y1], dist)
        mask.offset[x0:x1, y0:y1] = True

        maps.zmap[ix, iy] = box.cz
        maps.size[ix, iy] = (box.l, box.w, box.h)
        b = ori_bin_of(box.yaw)
        maps.ori_cls[ix, iy, 2 * b : 2 * b + 2] = (0.0, 1.0)
        residual = wrap_angle(box.yaw - ORI_BIN_CENTERS[b])
        maps.ori_off[ix, iy, 2 * b : 2 * b + 2] = (
            math.sin(residual),
            math.cos(residual),
        )
        mask.center[ix, iy] = True
    return maps, mask


def extract_peaks(
    heatmap: np.ndarray, score_threshold: float, max_detections: int = 300
) -> list[tuple]:
    """NMS-free peak cells: value equals its 3x3 max-pool (zero-padded) and
    clears the score threshold. Returns (ix, iy, class, score) sorted by
    descending score; plateau ties all qualify and the cap is applied in
    row-major order within equal scores."""
    pooled = maximum_filter(
        heatmap, size=(3, 3, 1), mode="constant", cval=0.0
    )
    ix, iy, cls = np.nonzero((heatmap == pooled) & (heatmap >= score_threshold))
    scores = heatmap[ix, iy, cls]
    order = np.lexsort((cls, iy, ix, -scores))
    order = order[:max_detections]
    return [
        (int(ix[i]), int(iy[i]), int(cls[i]), float(scores[i])) for i in order
    ]


def decode(
    maps: HeadMaps, cfg: TargetConfig, score_threshold: float
) -> list[Box3D]:
    """Read boxes back off predicted maps at heatmap peaks.

    Continuous center = (cell index + 0.5 + offset) * cell + range min; yaw =
    active bin center + atan2(sin, cos); sizes clamp to a small positive
    floor.
    """
    out = []
    for ix, iy, cls, score in extract_peaks(
        maps.heatmap, score_threshold, cfg.max_objects
    ):
        cx = cfg.x_min + (ix + 0.5 + maps.offset[ix, iy, 0]) * cfg.cell_size
        cy = cfg.y_min + (iy + 0.5 + maps.offset[ix, iy, 1]) * cfg.cell_size
        l, w, h = np.maximum(maps.size[ix, iy], MIN_BOX_DIM)
        logits = maps.ori_cls[ix, iy].reshape(NUM_ORI_BINS, 2)
        b = int(np.argmax(logits[:, 1] - logits[:, 0]))
        sin_r, cos_r = maps.ori_off[ix, iy, 2 * b : 2 * b + 2]
        yaw = wrap_angle(ORI_BIN_CENTERS[b] + math.atan2(sin_r, cos_r))
        out.append(
            Box3D(
                float(cx), float(cy), float(maps.zmap[ix, iy]),
                float(l), float(w), float(h), yaw,
                class_id=cls, score=min(1.0, score),
            )
        )
    return out


def _softmax_xent(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    picked = np.take_along_axis(shifted, labels[..., None], axis=-1)[..., 0]
    return logz - picked


def loss(
    pred: HeadMaps, target: HeadMaps, mask: TargetMask, cfg: TargetConfig
) -> LossBreakdown:
    """Combined objective: penalty-reduced focal loss on the heatmap plus
    L1 regression terms and MultiBin softmax cross-entropy, composed as
    heat + off*l_off + z*l_z + size*l_size + ori*l_ori."""
    if pred.grid_dims != target.grid_dims:
        raise ShapeMismatchError(
            f"pred grid {pred.grid_dims} != target grid {target.grid_dims}"
        )
    hm = np.clip(pred.heatmap, HEATMAP_EPS, 1.0 - HEATMAP_EPS)
    pos = target.heatmap >= 1.0
    num_pos = max(1, int(pos.sum()))
    pos_term = ((1.0 - hm) ** cfg.focal_alpha * np.log(hm))[pos].sum()
    neg = ~pos
    neg_term = (
        (1.0 - target.heatmap) ** cfg.focal_beta
        * hm**cfg.focal_alpha
        * np.log(1.0 - hm)
    )[neg].sum()
    heat = float(-(pos_term + neg_term) / num_pos)

    def masked_l1(p, t, m):
        if not m.any():
            return 0.0
        diff = np.abs(p - t)[m]
        return float(diff.reshape(len(diff), -1).sum(axis=1).mean())

    off = masked_l1(pred.offset, target.offset, mask.offset)
    z = masked_l1(pred.zmap, target.zmap, mask.center)
    size = masked_l1(pred.size, target.size, mask.center)

    ori = 0.0
    if mask.center.any():
        logits = pred.ori_cls[mask.center].reshape(-1, NUM_ORI_BINS, 2)
        labels = (
            target.ori_cls[mask.center]
            .reshape(-1, NUM_ORI_BINS, 2)[:, :, 1]
            .round()
            .astype(int)
        )
        xent = _softmax_xent(logits, labels).sum(axis=1).mean()
        # sin/cos residual supervised only on the target's active bin
        active = target.ori_cls[mask.center].reshape(-1, NUM_ORI_BINS, 2)[:, :, 1] > 0
        res = np.abs(pred.ori_off - target.ori_off)[mask.center].reshape(
            -1, NUM_ORI_BINS, 2
        )
        ori = float(xent + (res.sum(axis=2) * active).sum(axis=1).mean())

    total = (
        heat
        + cfg.lambda_off * off
        + cfg.lambda_z * z
        + cfg.lambda_size * size
        + cfg.lambda_ori * ori
    )
    return LossBreakdown(heat, off, z, size, ori, float(total))
