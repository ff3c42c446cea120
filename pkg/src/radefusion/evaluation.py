"""Rotated-box IoU, greedy matching, interpolated AP, and report tables.

IoU of BEV rectangles uses Sutherland-Hodgman polygon clipping; 3D IoU
multiplies the BEV intersection by the z-overlap. AP follows the KITTI
protocol: score-descending greedy matching (each ground truth matched at
most once, within its own frame), then N-point interpolation of the
precision-recall curve at recall levels k/N, k = 1..N. Report cells with
zero ground truth are absent (rendered "-") and excluded from mAP.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .dataio import CLASS_NAMES, Box3D
from .errors import DataError
from .geometry import RegionOfInterest, roi_contains

TOTAL_CONDITION = "Total"


@dataclass
class EvalConfig:
    iou_threshold: float = 0.3
    interpolation_points: int = 40
    roi: RegionOfInterest = field(default_factory=RegionOfInterest)

    def __post_init__(self):
        if not 0.0 < self.iou_threshold < 1.0:
            raise ValueError(f"iou_threshold must be in (0, 1), got {self.iou_threshold}")
        if self.interpolation_points < 2:
            raise ValueError("interpolation_points must be >= 2")


# ---------------------------------------------------------------------------
# Rotated IoU


def _polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: clip `subject` against convex CCW polygon `clip`."""
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        a = clip[i]
        b = clip[(i + 1) % n]
        edge = (b[0] - a[0], b[1] - a[1])
        input_pts = output
        output = []
        if not input_pts:
            break
        prev = input_pts[-1]
        prev_in = edge[0] * (prev[1] - a[1]) - edge[1] * (prev[0] - a[0]) >= 0
        for cur in input_pts:
            cur_in = edge[0] * (cur[1] - a[1]) - edge[1] * (cur[0] - a[0]) >= 0
            if cur_in != prev_in:
                # Intersection of segment prev->cur with the clip edge line.
                dx, dy = cur[0] - prev[0], cur[1] - prev[1]
                denom = edge[0] * dy - edge[1] * dx
                if denom != 0:
                    t = (edge[0] * (a[1] - prev[1]) - edge[1] * (a[0] - prev[0])) / denom
                    output.append((prev[0] + t * dx, prev[1] + t * dy))
            if cur_in:
                output.append(cur)
            prev, prev_in = cur, cur_in
    return np.asarray(output) if output else np.zeros((0, 2))


def _ccw(corners: np.ndarray) -> np.ndarray:
    x, y = corners[:, 0], corners[:, 1]
    signed = 0.5 * (np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))
    return corners if signed >= 0 else corners[::-1]


def rotated_iou_bev(a: Box3D, b: Box3D) -> float:
    """IoU of the two BEV footprint rectangles via convex polygon clipping."""
    pa = _ccw(a.bev_corners())
    pb = _ccw(b.bev_corners())
    area_a = _polygon_area(pa)
    area_b = _polygon_area(pb)
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    inter = _polygon_area(_clip_polygon(pa, pb))
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Volume IoU: BEV intersection area times the z-overlap length."""
    pa = _ccw(a.bev_corners())
    pb = _ccw(b.bev_corners())
    area_a = _polygon_area(pa)
    area_b = _polygon_area(pb)
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    inter_area = _polygon_area(_clip_polygon(pa, pb))
    za0, za1 = a.z_interval()
    zb0, zb1 = b.z_interval()
    z_overlap = max(0.0, min(za1, zb1) - max(za0, zb0))
    inter = inter_area * z_overlap
    vol_a = area_a * (za1 - za0)
    vol_b = area_b * (zb1 - zb0)
    union = vol_a + vol_b - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


# ---------------------------------------------------------------------------
# Average precision


def _greedy_match(dets: Sequence[Box3D], gts: Sequence[Box3D], iou_fn, threshold: float,
                  det_frames: Optional[Sequence] = None,
                  gt_frames: Optional[Sequence] = None):
    """Score-descending greedy matching; each GT claimed at most once.

    Returns (tp_flags, scores) both ordered by descending score.
    """
    if det_frames is None:
        det_frames = [0] * len(dets)
    if gt_frames is None:
        gt_frames = [0] * len(gts)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    matched = [False] * len(gts)
    tp = np.zeros(len(dets), dtype=bool)
    scores = np.zeros(len(dets))
    for rank, i in enumerate(order):
        best_iou = 0.0
        best_j = -1
        for j, gt in enumerate(gts):
            if matched[j] or gt_frames[j] != det_frames[i]:
                continue
            iou = iou_fn(dets[i], gt)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= threshold:
            matched[best_j] = True
            tp[rank] = True
        scores[rank] = dets[i].score
    return tp, scores


def _pr_curve(tp_flags: np.ndarray, n_gt: int) -> Tuple[np.ndarray, np.ndarray]:
    tp_cum = np.cumsum(tp_flags.astype(np.float64))
    n_det = np.arange(1, len(tp_flags) + 1, dtype=np.float64)
    recall = tp_cum / n_gt
    precision = tp_cum / n_det
    return recall, precision


def _interpolated_ap(recall: np.ndarray, precision: np.ndarray, n_points: int) -> float:
    levels = (np.arange(n_points) + 1.0) / n_points
    ap = 0.0
    for level in levels:
        mask = recall >= level - 1e-12
        ap += float(precision[mask].max()) if mask.any() else 0.0
    return ap / n_points


def average_precision(dets: Sequence[Box3D], gts: Sequence[Box3D], cfg: EvalConfig,
                      mode: str = "bev",
                      det_frames: Optional[Sequence] = None,
                      gt_frames: Optional[Sequence] = None) -> Optional[float]:
    """Interpolated AP at the configured IoU threshold; None when no GT exists."""
    if len(gts) == 0:
        return None
    if len(dets) == 0:
        return 0.0
    iou_fn = rotated_iou_bev if mode == "bev" else iou_3d
    tp, _ = _greedy_match(dets, gts, iou_fn, cfg.iou_threshold, det_frames, gt_frames)
    recall, precision = _pr_curve(tp, len(gts))
    return _interpolated_ap(recall, precision, cfg.interpolation_points)


# ---------------------------------------------------------------------------
# Report generation


@dataclass
class CellResult:
    ap_3d: Optional[float]
    ap_bev: Optional[float]
    n_gt: int
    n_tp: int
    n_fp: int
    pr_bev: Dict[str, List[float]] = field(default_factory=dict)
    pr_3d: Dict[str, List[float]] = field(default_factory=dict)


@dataclass
class EvalReport:
    """AP per (class, condition) with pooled 'Total' rows and per-row mAP."""

    cells: Dict[Tuple[str, str], CellResult]
    conditions: List[str]
    config: EvalConfig

    def map_for(self, condition: str) -> Tuple[Optional[float], Optional[float]]:
        vals_3d = [c.ap_3d for (cls, cond), c in self.cells.items()
                   if cond == condition and c.ap_3d is not None]
        vals_bev = [c.ap_bev for (cls, cond), c in self.cells.items()
                    if cond == condition and c.ap_bev is not None]
        m3 = float(np.mean(vals_3d)) if vals_3d else None
        mb = float(np.mean(vals_bev)) if vals_bev else None
        return m3, mb

    def to_dict(self) -> dict:
        cells = {}
        for (cls, cond), c in self.cells.items():
            cells.setdefault(cls, {})[cond] = {
                "ap_3d": c.ap_3d,
                "ap_bev": c.ap_bev,
                "n_gt": c.n_gt,
                "n_tp": c.n_tp,
                "n_fp": c.n_fp,
                "pr_bev": c.pr_bev,
                "pr_3d": c.pr_3d,
            }
        maps = {}
        for cond in self.conditions:
            m3, mb = self.map_for(cond)
            maps[cond] = {"map_3d": m3, "map_bev": mb}
        return {
            "iou_threshold": self.config.iou_threshold,
            "interpolation_points": self.config.interpolation_points,
            "class_order": list(CLASS_NAMES),
            "conditions": self.conditions,
            "cells": cells,
            "map": maps,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        def fmt(v: Optional[float]) -> str:
            return f"{100.0 * v:6.2f}" if v is not None else "     -"

        header = ["Condition".ljust(12), " mAP3D", "mAPBEV"]
        for cls in CLASS_NAMES:
            header.append(f"{cls[:10]:>10} 3D/BEV")
        lines = ["  ".join(header)]
        for cond in self.conditions:
            m3, mb = self.map_for(cond)
            row = [cond.ljust(12), fmt(m3), fmt(mb)]
            for cls in CLASS_NAMES:
                c = self.cells.get((cls, cond))
                if c is None or c.ap_3d is None:
                    row.append(f"{'-':>10} {'-':>6}")
                else:
                    row.append(f"{fmt(c.ap_3d):>10}/{fmt(c.ap_bev).strip():>6}")
            lines.append("  ".join(row))
        return "\n".join(lines) + "\n"


def _roi_filter(boxes: Sequence[Box3D], roi: RegionOfInterest) -> List[Box3D]:
    return [b for b in boxes if roi_contains(b, roi)]


def _evaluate_pool(dets, det_frames, gts, gt_frames, cfg: EvalConfig) -> CellResult:
    result = CellResult(ap_3d=None, ap_bev=None, n_gt=len(gts), n_tp=0, n_fp=0)
    if len(gts) == 0:
        return result
    tp_bev, scores = _greedy_match(dets, gts, rotated_iou_bev, cfg.iou_threshold,
                                   det_frames, gt_frames)
    tp_3d, _ = _greedy_match(dets, gts, iou_3d, cfg.iou_threshold, det_frames, gt_frames)
    result.n_tp = int(tp_bev.sum())
    result.n_fp = len(dets) - result.n_tp
    if len(dets) == 0:
        result.ap_bev = 0.0
        result.ap_3d = 0.0
        return result
    for flags, attr, pr_attr in ((tp_bev, "ap_bev", "pr_bev"), (tp_3d, "ap_3d", "pr_3d")):
        recall, precision = _pr_curve(flags, len(gts))
        setattr(result, attr, _interpolated_ap(recall, precision, cfg.interpolation_points))
        getattr(result, pr_attr).update(
            {"recall": recall.tolist(), "precision": precision.tolist(),
             "score": scores.tolist()}
        )
    return result


def build_report(dets_by_frame: Mapping[str, Sequence[Box3D]],
                 gts_by_frame: Mapping[str, Sequence[Box3D]],
                 tags_by_frame: Mapping[str, str],
                 cfg: EvalConfig = EvalConfig()) -> EvalReport:
    """Group detections/GT by (class, condition) and compute AP per cell.

    'Total' rows pool frames across all conditions (a single evaluation, not
    an average of per-condition cells). Frames present in dets_by_frame must
    exist in gts_by_frame.
    """
    unknown = set(dets_by_frame) - set(gts_by_frame)
    if unknown:
        raise DataError(f"detections reference unknown frame ids: {sorted(unknown)[:5]}")

    frame_ids = list(gts_by_frame.keys())
    conditions = sorted({tags_by_frame.get(fid, "") for fid in frame_ids})
    cells: Dict[Tuple[str, str], CellResult] = {}

    for cls_id, cls_name in enumerate(CLASS_NAMES):
        for cond in [TOTAL_CONDITION] + conditions:
            dets: List[Box3D] = []
            det_frames: List[str] = []
            gts: List[Box3D] = []
            gt_frames: List[str] = []
            for fid in frame_ids:
                if cond != TOTAL_CONDITION and tags_by_frame.get(fid, "") != cond:
                    continue
                for b in _roi_filter(gts_by_frame[fid], cfg.roi):
                    if b.class_id == cls_id:
                        gts.append(b)
                        gt_frames.append(fid)
                for b in _roi_filter(dets_by_frame.get(fid, []), cfg.roi):
                    if b.class_id == cls_id:
                        dets.append(b)
                        det_frames.append(fid)
            cells[(cls_name, cond)] = _evaluate_pool(dets, det_frames, gts, gt_frames, cfg)

    return EvalReport(cells=cells, conditions=[TOTAL_CONDITION] + conditions, config=cfg)
