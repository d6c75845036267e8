"""Command-line interface for the detection pipeline."""
from __future__ import annotations

import dataclasses
import sys
from pathlib import Path

import click
import numpy as np

from . import augment, ensemble, harness, heads, io, metrics, netspec, pipeline
from .cloud import Sweep, densify as densify_op, paint as paint_op
from .geom import CLASS_NAMES, class_id


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="Pipeline config file (YAML).")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--jobs", type=int, default=1, help="Worker processes where supported.")
@click.pass_context
def main(ctx, config_path, seed, jobs):
    """Non-learned LiDAR 3D detection pipeline tools."""
    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path
    ctx.obj["seed"] = seed
    ctx.obj["jobs"] = jobs


def _load_config(ctx) -> pipeline.PipelineConfig:
    path = ctx.obj.get("config_path")
    cfg = pipeline.load_config(path) if path else pipeline.PipelineConfig()
    if ctx.obj.get("seed") is not None:
        cfg = dataclasses.replace(cfg, seed=ctx.obj["seed"])
    return cfg


@main.command()
@click.option("--out", "outdir", type=click.Path(), required=True)
@click.option("--frames", type=int, default=1)
@click.pass_context
def simulate(ctx, outdir, frames):
    """Generate synthetic scenes: sweeps, poses, cameras, paint boxes, GT."""
    cfg = _load_config(ctx)
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    for i in range(frames):
        fid = f"frame_{i:04d}"
        scene = harness.generate_scene(cfg.scene, seed=cfg.seed * 100_003 + i, frame_id=fid)
        fdir = outdir / fid
        fdir.mkdir(exist_ok=True)
        sweeps = list(scene.sweeps) + [scene.current]
        meta = {"frame_id": fid, "sweeps": [], "cameras": [], "paint_boxes": []}
        for j, sweep in enumerate(sweeps):
            rel = f"sweep_{j:02d}.pcf"
            io.write_frame(fdir / rel, sweep.points)
            meta["sweeps"].append(
                {
                    "path": rel,
                    "timestamp": sweep.timestamp,
                    "pose": io.transform_to_dict(sweep.pose),
                }
            )
        for cam, src in zip(scene.cameras, scene.paint_sources):
            meta["cameras"].append(io.camera_to_dict(cam))
            meta["paint_boxes"].append(
                [
                    {
                        "xmin": b.xmin, "ymin": b.ymin, "xmax": b.xmax,
                        "ymax": b.ymax, "class": CLASS_NAMES[b.class_id],
                        "score": b.score,
                    }
                    for b in src.boxes
                ]
            )
        io.write_yaml(fdir / "scene.yaml", meta)
        io.write_detections(fdir / "gt.det", fid, scene.gt_boxes)
    click.echo(f"wrote {frames} frame(s) to {outdir}")


def _load_scene_dir(fdir: Path):
    meta = io.read_yaml(fdir / "scene.yaml")
    sweeps = [
        Sweep(
            io.read_frame(fdir / rec["path"]),
            io.transform_from_dict(rec["pose"]),
            rec["timestamp"],
        )
        for rec in meta["sweeps"]
    ]
    sources = []
    from .cloud import Box2D, PaintSource

    for cam_d, boxes_d in zip(meta["cameras"], meta["paint_boxes"]):
        cam = io.camera_from_dict(cam_d)
        boxes = tuple(
            Box2D(b["xmin"], b["ymin"], b["xmax"], b["ymax"],
                  class_id(b["class"]), b["score"])
            for b in boxes_d
        )
        sources.append(PaintSource(cam, boxes))
    return meta, sweeps, sources


@main.command()
@click.option("--scene-dir", type=click.Path(exists=True), required=True)
@click.option("--out", "outpath", type=click.Path(), required=True)
def densify(scene_dir, outpath):
    """Accumulate a scene directory's sweeps into one frame file."""
    _, sweeps, _ = _load_scene_dir(Path(scene_dir))
    merged = densify_op(sweeps[-1], sweeps[:-1])
    io.write_frame(outpath, merged)
    click.echo(f"{len(merged)} points -> {outpath}")


@main.command()
@click.option("--in", "inpath", type=click.Path(exists=True), required=True)
@click.option("--scene-dir", type=click.Path(exists=True), required=True)
@click.option("--out", "outpath", type=click.Path(), required=True)
@click.option("--binary-scores", is_flag=True, default=False)
def paint(inpath, scene_dir, outpath, binary_scores):
    """Paint a frame file with the scene's camera boxes."""
    _, _, sources = _load_scene_dir(Path(scene_dir))
    points = io.read_frame(inpath)
    painted = paint_op(points, sources, binary_scores=binary_scores)
    io.write_frame(outpath, painted)
    n = int((painted.painted.sum(axis=1) > 0).sum())
    click.echo(f"painted {n}/{len(painted)} points -> {outpath}")


@main.command()
@click.option("--gt", "gtpath", type=click.Path(exists=True), required=True)
@click.option("--out", "outpath", type=click.Path(), required=True)
@click.pass_context
def encode(ctx, gtpath, outpath):
    """Encode a GT detection file into head target maps (NPZ)."""
    cfg = _load_config(ctx)
    tcfg = cfg.target_config()
    _, boxes = io.read_detections(gtpath)
    maps, mask = heads.encode_targets(boxes, tcfg, cfg.grid_dims())
    np.savez_compressed(
        outpath,
        heatmap=maps.heatmap, offset=maps.offset, zmap=maps.zmap,
        size=maps.size, ori_cls=maps.ori_cls, ori_off=maps.ori_off,
        mask_center=mask.center, mask_offset=mask.offset,
        cell_size=tcfg.cell_size, x_min=tcfg.x_min, y_min=tcfg.y_min,
    )
    click.echo(f"encoded {len(boxes)} boxes -> {outpath}")


@main.command()
@click.option("--maps", "mapspath", type=click.Path(exists=True), required=True)
@click.option("--out", "outpath", type=click.Path(), required=True)
@click.option("--frame-id", default="frame_0000")
@click.option("--threshold", type=float, default=0.5)
def decode(mapspath, outpath, frame_id, threshold):
    """Decode head maps (NPZ) back into a detection file."""
    data = np.load(mapspath)
    maps = heads.HeadMaps(
        heatmap=data["heatmap"], offset=data["offset"], zmap=data["zmap"],
        size=data["size"], ori_cls=data["ori_cls"], ori_off=data["ori_off"],
    )
    tcfg = heads.TargetConfig(
        cell_size=float(data["cell_size"]),
        x_min=float(data["x_min"]),
        y_min=float(data["y_min"]),
    )
    boxes = heads.decode(maps, tcfg, threshold)
    io.write_detections(outpath, frame_id, boxes)
    click.echo(f"decoded {len(boxes)} boxes -> {outpath}")


@main.command(name="ensemble")
@click.option("--inputs", type=click.Path(exists=True), multiple=True, required=True)
@click.option("--thresholds", "thr_name", default="3d",
              help="'3d', 'domain_adaptation' or a YAML file.")
@click.option("--out", "outpath", type=click.Path(), required=True)
def ensemble_cmd(inputs, thr_name, outpath):
    """Fuse detection files for one frame with weighted boxes fusion."""
    thr = pipeline.resolve_thresholds(thr_name)
    sets = []
    frame_id = None
    for path in inputs:
        fid, boxes = io.read_detections(path)
        if frame_id is None:
            frame_id = fid
        elif fid != frame_id:
            raise click.ClickException(
                f"inputs mix frames {frame_id!r} and {fid!r}"
            )
        sets.append(boxes)
    fused = ensemble.wbf_fuse(sets, thr)
    io.write_detections(outpath, frame_id, fused)
    click.echo(f"fused {sum(map(len, sets))} boxes into {len(fused)} -> {outpath}")


class _GridObjective:
    """Picklable objective: fuse model detections at candidate thresholds and
    score one class's APH."""

    def __init__(self, model_frames, gt_frames, cls, base_thr, difficulty):
        self.model_frames = model_frames
        self.gt_frames = gt_frames
        self.cls = cls
        self.base = base_thr
        self.difficulty = difficulty

    def __call__(self, triple):
        iou, pre, post = triple
        per = list(self.base.per_class)
        per[self.cls] = ensemble.ClassThresholds(iou, pre, post)
        thr = ensemble.FusionThresholds(tuple(per))
        fused = {
            fid: ensemble.wbf_fuse([m.get(fid, []) for m in self.model_frames], thr)
            for fid in self.gt_frames
        }
        report = metrics.evaluate(
            fused, self.gt_frames, metrics.MatchConfig(difficulty=self.difficulty)
        )
        return report.class_report(self.cls).aph


@main.command()
@click.option("--pred-dir", type=click.Path(exists=True), required=True,
              help="Directory with one subdirectory of .det files per model.")
@click.option("--gt-dir", type=click.Path(exists=True), required=True)
@click.option("--class", "cls_name", type=click.Choice(CLASS_NAMES), required=True)
@click.option("--difficulty", type=click.Choice(["L1", "L2"]), default="L2")
@click.option("--out", "outpath", type=click.Path(), required=True)
@click.pass_context
def gridsearch(ctx, pred_dir, gt_dir, cls_name, difficulty, outpath):
    """Naive grid search over fusion thresholds for one class."""
    model_frames = [
        io.read_detection_dir(d) for d in sorted(Path(pred_dir).iterdir()) if d.is_dir()
    ]
    if not model_frames:
        raise click.ClickException(f"no model subdirectories under {pred_dir}")
    gt_frames = io.read_detection_dir(gt_dir)
    cls = class_id(cls_name)
    objective = _GridObjective(
        model_frames, gt_frames, cls, ensemble.submission_thresholds_3d(), difficulty
    )
    best, trace = ensemble.grid_search(
        objective, ensemble.GridSearchSpec(), jobs=ctx.obj.get("jobs", 1)
    )
    io.write_yaml(
        outpath,
        {
            "class": cls_name,
            "best": {"iou": best[0], "skip_pre": best[1], "skip_post": best[2]},
            "objective": max(v for _, v in trace),
            "evaluations": len(trace),
        },
    )
    click.echo(f"best thresholds for {cls_name}: {best} -> {outpath}")


@main.command(name="eval")
@click.option("--pred", "pred_dir", type=click.Path(exists=True), required=True)
@click.option("--gt", "gt_dir", type=click.Path(exists=True), required=True)
@click.option("--difficulty", type=click.Choice(["L1", "L2"]), default="L2")
@click.option("--out", "outpath", type=click.Path(), required=True)
@click.option("--pr-curves", type=click.Path(), default=None,
              help="Optional NPZ with per-class PR samples.")
def eval_cmd(pred_dir, gt_dir, difficulty, outpath, pr_curves):
    """Evaluate detection files against ground truth."""
    preds = io.read_detection_dir(pred_dir)
    gts = io.read_detection_dir(gt_dir)
    report = metrics.evaluate(preds, gts, metrics.MatchConfig(difficulty=difficulty))
    io.write_yaml(outpath, metrics.report_to_dict(report))
    if pr_curves:
        np.savez_compressed(
            pr_curves,
            **{CLASS_NAMES[c]: report.per_class[c].pr_samples for c in range(3)},
        )
    click.echo(f"mAP={report.map:.4f} mAPH={report.maph:.4f} -> {outpath}")


@main.group(name="netspec")
def netspec_group():
    """Backbone shape/stride checks."""


@netspec_group.command(name="check")
@click.argument("backbone", type=click.Choice(sorted(netspec.BACKBONES)))
def netspec_check(backbone):
    """Print the stride/channel table and verify the downsample factor."""
    expected = {"B1": 8, "B2": 8, "B3": 4}
    report = netspec.backbone_report(backbone)
    click.echo(f"backbone {backbone}")
    for section in ("fe", "rpn"):
        click.echo(f"  [{section}]")
        for name, (stride, ch) in report[section].items():
            click.echo(f"    {name:<14} stride {stride:>4}  channels {ch}")
    click.echo(
        f"  FE stride {report['fe_stride']} x RPN stride {report['rpn_stride']} "
        f"= overall {report['overall']}"
    )
    if report["overall"] != expected[backbone]:
        click.echo(
            f"MISMATCH: expected {expected[backbone]}, got {report['overall']}",
            err=True,
        )
        sys.exit(1)
    click.echo("OK")


@main.command(name="pipeline")
@click.option("--out", "outdir", type=click.Path(), required=True)
@click.pass_context
def pipeline_cmd(ctx, outdir):
    """Run the full pipeline per the loaded config."""
    cfg = _load_config(ctx)
    manifest = pipeline.run_pipeline(cfg, outdir)
    click.echo(
        f"pipeline done: {len(manifest['frames'])} frames, "
        f"mAP={manifest['mAP']:.4f} mAPH={manifest['mAPH']:.4f} -> {outdir}"
    )


if __name__ == "__main__":
    main()
