"""Detection evaluation: greedy matching, AP and heading-weighted APH,
per-class and difficulty-filtered reports."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geom import (
    Box3D,
    InvalidParameterError,
    bev_iou,
    wrap_angle,
    CLASS_NAMES,
    NUM_CLASSES,
    DIFFICULTY_L1,
)

DEFAULT_IOU_THRESHOLDS = (0.7, 0.5, 0.5)  # vehicle, pedestrian, cyclist


@dataclass(frozen=True)
class MatchConfig:
    iou_thresholds: tuple = DEFAULT_IOU_THRESHOLDS
    difficulty: str = "L2"  # L2 includes every box, L1 only L1-labelled GT
    num_recall_points: int = 101

    def __post_init__(self):
        if any(not 0.0 < t <= 1.0 for t in self.iou_thresholds):
            raise InvalidParameterError("IoU thresholds must lie in (0,1]")
        if self.difficulty not in ("L1", "L2"):
            raise InvalidParameterError(f"unknown difficulty {self.difficulty!r}")
        if self.num_recall_points < 2:
            raise InvalidParameterError("need at least 2 recall points")


@dataclass(frozen=True)
class Match:
    """One detection's outcome: matched flags a TP; ignored detections
    (overlapping difficulty-filtered GT) count as neither TP nor FP."""

    score: float
    matched: bool
    heading_error: float = 0.0
    ignored: bool = False


@dataclass(frozen=True)
class ClassReport:
    ap: float
    aph: float
    tp: int
    fp: int
    fn: int
    num_gt: int
    pr_samples: np.ndarray  # (num_recall_points, 3): recall, precision, precision_h
    undefined: bool = False  # no GT of this class


@dataclass(frozen=True)
class EvalReport:
    per_class: tuple  # ClassReport per class id
    map: float
    maph: float

    def class_report(self, cls: int) -> ClassReport:
        return self.per_class[cls]


def match_frame(
    dets: list[Box3D], gts: list[Box3D], cls: int, cfg: MatchConfig
) -> tuple[list[Match], int]:
    """Greedy score-ordered matching of one frame's detections of one class.

    Each detection claims the unmatched GT with the highest BEV IoU at or
    above the class threshold. Heading error is |wrap(yaw_det - yaw_gt)|.
    GT outside the difficulty filter is ignorable: detections overlapping it
    are excluded from FP counting.
    """
    thr = cfg.iou_thresholds[cls]
    eval_gts = [g for g in gts if g.class_id == cls]
    if cfg.difficulty == "L1":
        counted = [g for g in eval_gts if g.difficulty == DIFFICULTY_L1]
        ignored = [g for g in eval_gts if g.difficulty != DIFFICULTY_L1]
    else:
        counted, ignored = eval_gts, []
    taken = [False] * len(counted)
    matches = []
    for det in sorted(
        (d for d in dets if d.class_id == cls), key=lambda d: -d.score
    ):
        best, best_iou = None, thr
        for i, gt in enumerate(counted):
            if taken[i]:
                continue
            iou = bev_iou(det, gt)
            if iou >= best_iou:
                best, best_iou = i, iou
        if best is not None:
            taken[best] = True
            err = abs(wrap_angle(det.yaw - counted[best].yaw))
            matches.append(Match(det.score, True, err))
        elif any(bev_iou(det, g) >= thr for g in ignored):
            matches.append(Match(det.score, False, ignored=True))
        else:
            matches.append(Match(det.score, False))
    return matches, len(counted)


def ap_aph(matches: list[Match], num_gt: int, cfg: MatchConfig) -> tuple:
    """(AP, APH, pr_samples) from pooled matches.

    Sweeping the score threshold over all detections gives the PR curve; AP
    and APH are means of the precision (resp. heading-weighted precision)
    envelope sampled at evenly spaced recall points. Each TP contributes
    max(0, 1 - heading_error/pi) to the heading-weighted precision
    numerator.
    """
    recall_pts = np.linspace(0.0, 1.0, cfg.num_recall_points)
    if num_gt == 0:
        return 0.0, 0.0, np.stack(
            [recall_pts, np.zeros_like(recall_pts), np.zeros_like(recall_pts)], axis=1
        )
    live = sorted((m for m in matches if not m.ignored), key=lambda m: -m.score)
    tp = np.cumsum([1.0 if m.matched else 0.0 for m in live])
    n = np.arange(1, len(live) + 1)
    heading_w = np.cumsum(
        [max(0.0, 1.0 - m.heading_error / math.pi) if m.matched else 0.0 for m in live]
    )
    if len(live) == 0:
        zeros = np.zeros_like(recall_pts)
        return 0.0, 0.0, np.stack([recall_pts, zeros, zeros], axis=1)
    recall = tp / num_gt
    precision = tp / n
    precision_h = heading_w / n

    # precision envelope: best precision at recall >= r
    env = np.maximum.accumulate(precision[::-1])[::-1]
    env_h = np.maximum.accumulate(precision_h[::-1])[::-1]
    idx = np.searchsorted(recall, recall_pts, side="left")
    p_at = np.where(idx < len(live), env[np.minimum(idx, len(live) - 1)], 0.0)
    ph_at = np.where(idx < len(live), env_h[np.minimum(idx, len(live) - 1)], 0.0)
    ap = float(p_at.mean())
    aph = float(ph_at.mean())
    return ap, aph, np.stack([recall_pts, p_at, ph_at], axis=1)


def evaluate(
    pred_frames: dict, gt_frames: dict, cfg: MatchConfig = MatchConfig()
) -> EvalReport:
    """Per-class AP/APH over aligned frame dictionaries (frame id -> boxes).

    Frames missing from predictions contribute zero detections. Aggregates
    are unweighted class means.
    """
    reports = []
    for cls in range(NUM_CLASSES):
        matches: list[Match] = []
        num_gt = 0
        for fid in sorted(gt_frames):
            dets = pred_frames.get(fid, [])
            m, n = match_frame(dets, gt_frames[fid], cls, cfg)
            matches.extend(m)
            num_gt += n
        ap, aph, pr = ap_aph(matches, num_gt, cfg)
        tp = sum(1 for m in matches if m.matched)
        fp = sum(1 for m in matches if not m.matched and not m.ignored)
        reports.append(
            ClassReport(
                ap, aph, tp, fp, num_gt - tp, num_gt, pr, undefined=num_gt == 0
            )
        )
    mean_ap = float(np.mean([r.ap for r in reports]))
    mean_aph = float(np.mean([r.aph for r in reports]))
    return EvalReport(tuple(reports), mean_ap, mean_aph)


def report_to_dict(report: EvalReport) -> dict:
    out = {"mAP": report.map, "mAPH": report.maph, "classes": {}}
    for cls, r in enumerate(report.per_class):
        out["classes"][CLASS_NAMES[cls]] = {
            "AP": r.ap,
            "APH": r.aph,
            "TP": r.tp,
            "FP": r.fp,
            "FN": r.fn,
            "num_gt": r.num_gt,
            "undefined": r.undefined,
        }
    return out
