"""Voxelization into mean-feature voxels and a dense BEV pseudo image."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cloud import ConfigurationError, PointCloud, TRAIN_RANGE
from .geom import InvalidParameterError


@dataclass(frozen=True)
class VoxelGridSpec:
    voxel_size: tuple = (0.04, 0.04, 0.1)
    x_range: tuple = TRAIN_RANGE[0]
    y_range: tuple = TRAIN_RANGE[1]
    z_range: tuple = TRAIN_RANGE[2]
    max_points_per_voxel: int = 5
    max_voxels: int = 1_000_000

    def __post_init__(self):
        if any(s <= 0 for s in self.voxel_size):
            raise InvalidParameterError("voxel sizes must be positive")
        if self.max_points_per_voxel <= 0 or self.max_voxels <= 0:
            raise InvalidParameterError("voxel capacities must be positive")
        if any(d <= 0 for d in self.grid_dims):
            raise InvalidParameterError("grid dims must be positive")

    @property
    def grid_dims(self) -> tuple:
        (x0, x1), (y0, y1), (z0, z1) = self.x_range, self.y_range, self.z_range
        dx, dy, dz = self.voxel_size
        return (
            int(round((x1 - x0) / dx)),
            int(round((y1 - y0) / dy)),
            int(round((z1 - z0) / dz)),
        )


@dataclass(frozen=True)
class VoxelSet:
    """Per-voxel integer indices, mean features and contributing point counts."""

    indices: np.ndarray  # (M, 3) int64, (ix, iy, iz)
    features: np.ndarray  # (M, D) float64 mean over contained points
    counts: np.ndarray  # (M,) int64

    def __len__(self) -> int:
        return len(self.indices)


def voxelize(points: PointCloud, spec: VoxelGridSpec) -> VoxelSet:
    """Mean-pool point attributes into voxels.

    Index = floor((coord - min) / size); at most max_points_per_voxel points
    contribute per voxel, taken in input order; voxels are created in
    first-seen order up to max_voxels. Out-of-range points are dropped.
    """
    nx, ny, nz = spec.grid_dims
    data = points.data.astype(np.float64)
    if len(data) == 0:
        return VoxelSet(
            np.empty((0, 3), dtype=np.int64),
            np.empty((0, data.shape[1])),
            np.empty(0, dtype=np.int64),
        )
    mins = np.array([spec.x_range[0], spec.y_range[0], spec.z_range[0]])
    idx = np.floor((data[:, :3] - mins) / np.array(spec.voxel_size)).astype(np.int64)
    in_range = (
        (idx[:, 0] >= 0) & (idx[:, 0] < nx)
        & (idx[:, 1] >= 0) & (idx[:, 1] < ny)
        & (idx[:, 2] >= 0) & (idx[:, 2] < nz)
    )
    data, idx = data[in_range], idx[in_range]
    if len(data) == 0:
        return VoxelSet(
            np.empty((0, 3), dtype=np.int64),
            np.empty((0, points.data.shape[1])),
            np.empty(0, dtype=np.int64),
        )

    linear = (idx[:, 0] * ny + idx[:, 1]) * nz + idx[:, 2]
    uniq, first_pos, inverse = np.unique(
        linear, return_index=True, return_inverse=True
    )
    # rank voxels by first appearance in the input stream
    seen_order = np.argsort(first_pos, kind="stable")
    rank_of_uniq = np.empty(len(uniq), dtype=np.int64)
    rank_of_uniq[seen_order] = np.arange(len(uniq))
    rank = rank_of_uniq[inverse]

    keep_voxel = rank < spec.max_voxels
    data, rank = data[keep_voxel], rank[keep_voxel]
    num_voxels = min(len(uniq), spec.max_voxels)

    # per-voxel running position of each point, preserving input order
    order = np.argsort(rank, kind="stable")
    sorted_rank = rank[order]
    boundaries = np.flatnonzero(np.diff(sorted_rank)) + 1
    starts = np.concatenate([[0], boundaries])
    group_start = np.repeat(starts, np.diff(np.concatenate([starts, [len(order)]])))
    within = np.arange(len(order)) - group_start
    keep_point = within < spec.max_points_per_voxel
    sel = order[keep_point]

    dim = data.shape[1]
    sums = np.zeros((num_voxels, dim))
    counts = np.zeros(num_voxels, dtype=np.int64)
    np.add.at(sums, rank[sel], data[sel])
    np.add.at(counts, rank[sel], 1)
    features = sums / counts[:, None]

    voxel_linear = uniq[seen_order[:num_voxels]]
    out_idx = np.stack(
        [voxel_linear // (ny * nz), (voxel_linear // nz) % ny, voxel_linear % nz],
        axis=1,
    )
    return VoxelSet(out_idx, features, counts)


@dataclass(frozen=True)
class BevGrid:
    """Dense top-down pseudo image: (W, H, channels), W along x, H along y."""

    values: np.ndarray
    counts: np.ndarray  # (W, H) points per cell
    cell_size: tuple  # (meters, meters)

    @property
    def shape(self) -> tuple:
        return self.values.shape


def to_bev(voxels: VoxelSet, spec: VoxelGridSpec, downsample: int = 1) -> BevGrid:
    """Pool voxels over z and (downsample x downsample) x-y footprints into a
    dense BEV grid by count-weighted mean."""
    if downsample not in (1, 2, 4, 8):
        raise ConfigurationError(f"unsupported downsample factor {downsample}")
    nx, ny, _ = spec.grid_dims
    if nx % downsample or ny % downsample:
        raise ConfigurationError(
            f"downsample {downsample} does not divide grid dims ({nx}, {ny})"
        )
    w, h = nx // downsample, ny // downsample
    dim = voxels.features.shape[1] if len(voxels) else 1
    sums = np.zeros((w, h, dim))
    counts = np.zeros((w, h), dtype=np.int64)
    if len(voxels):
        cx = voxels.indices[:, 0] // downsample
        cy = voxels.indices[:, 1] // downsample
        np.add.at(sums, (cx, cy), voxels.features * voxels.counts[:, None])
        np.add.at(counts, (cx, cy), voxels.counts)
    values = np.divide(
        sums, counts[:, :, None], out=np.zeros_like(sums), where=counts[:, :, None] > 0
    )
    dx, dy, _ = spec.voxel_size
    return BevGrid(values, counts, (dx * downsample, dy * downsample))
