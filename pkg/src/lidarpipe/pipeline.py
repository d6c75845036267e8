"""End-to-end pipeline runner: simulate -> densify -> paint -> filter ->
voxelize -> detect -> TTA -> fuse -> evaluate, with all artifacts written to
disk under a manifest."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ensemble, harness, heads, io, metrics
from .cloud import INFERENCE_RANGE, PointCloud, filter_range, densify, paint
from .geom import Box3D, InvalidParameterError
from .harness import PipelineError
from .io import FormatError, check_known_keys
from .voxel import VoxelGridSpec, to_bev, voxelize


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    frames: int = 2
    scene: harness.SceneSpec = field(default_factory=harness.SceneSpec)
    detection_range: tuple = INFERENCE_RANGE
    voxel_size: tuple = (0.04, 0.04, 0.1)
    bev_downsample: int = 8
    detectors: tuple = (harness.DetectorSpec(kind="oracle"),)
    tta_plan: str = "identity"  # identity | default
    thresholds: str = "3d"  # 3d | domain_adaptation | path to a YAML file
    difficulty: str = "L2"
    paint_enabled: bool = True
    export_plots: bool = False

    def voxel_spec(self) -> VoxelGridSpec:
        xr, yr, zr = self.detection_range
        return VoxelGridSpec(
            voxel_size=tuple(self.voxel_size), x_range=tuple(xr),
            y_range=tuple(yr), z_range=tuple(zr),
        )

    def target_config(self) -> heads.TargetConfig:
        xr, yr, _ = self.detection_range
        cell = self.voxel_size[0] * self.bev_downsample
        return heads.TargetConfig(cell_size=cell, x_min=xr[0], y_min=yr[0])

    def grid_dims(self) -> tuple:
        xr, yr, _ = self.detection_range
        cell = self.voxel_size[0] * self.bev_downsample
        return (
            int(round((xr[1] - xr[0]) / cell)),
            int(round((yr[1] - yr[0]) / cell)),
        )


def _build_dataclass(cls, data: dict, context: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    check_known_keys(data, fields, context)
    kwargs = {}
    for key, value in data.items():
        if isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> PipelineConfig:
    data = dict(data or {})
    check_known_keys(
        data, [f.name for f in dataclasses.fields(PipelineConfig)], "pipeline config"
    )
    if "scene" in data:
        data["scene"] = _build_dataclass(
            harness.SceneSpec, data["scene"], "scene spec"
        )
    if "detectors" in data:
        data["detectors"] = tuple(
            _build_dataclass(harness.DetectorSpec, d, f"detector[{i}]")
            for i, d in enumerate(data["detectors"])
        )
    for key in ("detection_range", "voxel_size"):
        if key in data:
            data[key] = tuple(tuple(v) if isinstance(v, list) else v for v in data[key])
    return PipelineConfig(**data)


def load_config(path) -> PipelineConfig:
    return config_from_dict(io.read_yaml(path))


def resolve_thresholds(name: str) -> ensemble.FusionThresholds:
    if name == "3d":
        return ensemble.submission_thresholds_3d()
    if name == "domain_adaptation":
        return ensemble.submission_thresholds_domain_adaptation()
    return ensemble.thresholds_from_dict(io.read_yaml(name))


def resolve_plan(name: str) -> ensemble.TtaPlan:
    if name == "identity":
        return ensemble.identity_plan()
    if name == "default":
        return ensemble.default_plan()
    raise InvalidParameterError(f"unknown TTA plan {name!r}")


def prepare_frame(cfg: PipelineConfig, scene: harness.Scene) -> harness.SimFrame:
    """Densify, paint and range-filter one scene into a detector input."""
    points = densify(scene.current, scene.sweeps)
    if cfg.paint_enabled:
        points = paint(points, scene.paint_sources)
    xr, yr, zr = cfg.detection_range
    points = filter_range(points, tuple(xr), tuple(yr), tuple(zr))
    return harness.SimFrame(scene.frame_id, points, tuple(scene.gt_boxes))


def run_pipeline(cfg: PipelineConfig, outdir) -> dict:
    """Execute the full pipeline and write artifacts. Returns the manifest."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    thresholds = resolve_thresholds(cfg.thresholds)
    plan = resolve_plan(cfg.tta_plan)
    target_cfg = cfg.target_config()
    grid_dims = cfg.grid_dims()
    vspec = cfg.voxel_spec()

    frames = {}
    gt = {}
    voxel_stats = []
    (outdir / "frames").mkdir(exist_ok=True)
    for i in range(cfg.frames):
        fid = f"frame_{i:04d}"
        try:
            scene = harness.generate_scene(cfg.scene, seed=cfg.seed * 100_003 + i, frame_id=fid)
            frame = prepare_frame(cfg, scene)
        except Exception as exc:
            raise PipelineError(f"stage=prepare frame={fid}: {exc}") from exc
        frames[fid] = frame
        gt[fid] = list(scene.gt_boxes)
        io.write_frame(outdir / "frames" / f"{fid}.pcf", frame.points)

        voxels = voxelize(frame.points, vspec)
        bev = to_bev(voxels, vspec, cfg.bev_downsample)
        in_voxel_mass = float((voxels.features * voxels.counts[:, None]).sum())
        bev_mass = float((bev.values * bev.counts[:, :, None]).sum())
        voxel_stats.append(
            {
                "frame": fid,
                "num_points": len(frame.points),
                "num_voxels": len(voxels),
                "voxel_mass": in_voxel_mass,
                "bev_mass": bev_mass,
            }
        )
        if cfg.export_plots:
            (outdir / "plots").mkdir(exist_ok=True)
            harness.export_bev_plot(outdir / "plots" / fid, frame.points, gt[fid])

    io.write_detection_dir(outdir / "gt", gt)

    per_model = []
    for m, dspec in enumerate(cfg.detectors):
        try:
            detector = harness.make_detector(dspec, target_cfg, grid_dims)
        except Exception as exc:
            raise PipelineError(f"stage=detect model={m}: {exc}") from exc
        model_dets = {}
        for fid, frame in frames.items():
            try:
                model_dets[fid] = ensemble.run_tta(
                    detector,
                    frame,
                    plan,
                    thresholds,
                    transform_frame=harness.transform_sim_frame,
                )
            except Exception as exc:
                raise PipelineError(f"stage=detect model={m} frame={fid}: {exc}") from exc
        per_model.append(model_dets)
        io.write_detection_dir(outdir / f"model_{m}", model_dets)

    fused = {}
    for fid in frames:
        try:
            fused[fid] = ensemble.wbf_fuse(
                [md[fid] for md in per_model], thresholds
            )
        except Exception as exc:
            raise PipelineError(f"stage=fuse frame={fid}: {exc}") from exc
    io.write_detection_dir(outdir / "fused", fused)

    report = metrics.evaluate(
        fused, gt, metrics.MatchConfig(difficulty=cfg.difficulty)
    )
    io.write_yaml(outdir / "report.yaml", metrics.report_to_dict(report))

    manifest = {
        "seed": cfg.seed,
        "frames": sorted(frames),
        "num_models": len(cfg.detectors),
        "tta_plan": cfg.tta_plan,
        "tta_transforms": len(plan),
        "thresholds": ensemble.thresholds_to_dict(thresholds),
        "voxel_stats": voxel_stats,
        "mAP": report.map,
        "mAPH": report.maph,
    }
    io.write_yaml(outdir / "manifest.yaml", manifest)
    return manifest
