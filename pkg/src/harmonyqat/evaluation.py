"""COCO-style AP metrics and task-harmony diagnostics.

Detections here are plain (box, class, score) records, typically post-NMS.
The harmony report captures, for true positives, the relationship between
the classification score p and the match IoU u: a gap histogram, IoU-interval
counts, and the raw (p, u) pairs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .detector import Box, Detection, GroundTruth, iou

COCO_IOU_THRESHOLDS = [round(0.5 + 0.05 * i, 2) for i in range(10)]
RECALL_GRID = np.linspace(0.0, 1.0, 101)
GAP_BINS = 10
IOU_INTERVALS = [(0.5, 0.6), (0.6, 0.7), (0.7, 0.8), (0.8, 0.9), (0.9, 1.0)]
HARMONY_TP_IOU = 0.5


@dataclass
class MatchResult:
    is_tp: list[bool]
    matched_gt: list[int]     # -1 for false positives
    match_iou: list[float]
    scores: list[float]
    num_gt: int


def match_detections(detections: Sequence[Detection], gts: Sequence[GroundTruth],
                     iou_threshold: float) -> MatchResult:
    """Greedy matching in descending score order; each gt claims at most one
    detection. Same-class only; below-threshold overlaps are false positives."""
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    taken = [False] * len(gts)
    is_tp = [False] * len(detections)
    matched = [-1] * len(detections)
    match_iou = [0.0] * len(detections)
    for i in order:
        det = detections[i]
        best_j, best_v = -1, 0.0
        for j, gt in enumerate(gts):
            if taken[j] or gt.class_id != det.class_id:
                continue
            v = iou(det.box, gt.box)
            if v >= iou_threshold and v > best_v:
                best_j, best_v = j, v
        if best_j >= 0:
            taken[best_j] = True
            is_tp[i] = True
            matched[i] = best_j
            match_iou[i] = best_v
    return MatchResult(is_tp=is_tp, matched_gt=matched,
                       match_iou=match_iou,
                       scores=[d.score for d in detections], num_gt=len(gts))


def average_precision(flags_scores: Sequence[tuple[float, bool]], num_gt: int) -> Optional[float]:
    """101-point interpolated AP from (score, is_tp) pairs.

    Returns None when there are no ground truths and no detections (the class
    is then excluded from the mean).
    """
    if num_gt == 0:
        return None if not flags_scores else 0.0
    if not flags_scores:
        return 0.0
    order = sorted(range(len(flags_scores)), key=lambda i: (-flags_scores[i][0], i))
    tp = np.cumsum([1.0 if flags_scores[i][1] else 0.0 for i in order])
    fp = np.cumsum([0.0 if flags_scores[i][1] else 1.0 for i in order])
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, 1e-12)
    # precision envelope: best precision at recall >= r
    ap = 0.0
    for r in RECALL_GRID:
        mask = recall >= r - 1e-12
        ap += float(precision[mask].max()) if mask.any() else 0.0
    return ap / len(RECALL_GRID)


@dataclass
class APResult:
    per_class: dict[int, dict[float, Optional[float]]]
    mAP: float
    ap50: float
    ap75: float

    def to_dict(self) -> dict:
        return {
            "mAP": self.mAP,
            "AP50": self.ap50,
            "AP75": self.ap75,
            "per_class": {str(c): {f"{t:.2f}": v for t, v in th.items()}
                          for c, th in self.per_class.items()},
        }


def map_coco(detections_per_image: Sequence[Sequence[Detection]],
             gts_per_image: Sequence[Sequence[GroundTruth]]) -> APResult:
    """mAP over the 10 COCO IoU thresholds, averaged over classes present."""
    if len(detections_per_image) != len(gts_per_image):
        raise ValueError("detections and ground truths must align per image")
    classes = sorted({g.class_id for gts in gts_per_image for g in gts} |
                     {d.class_id for dets in detections_per_image for d in dets})
    per_class: dict[int, dict[float, Optional[float]]] = {}
    for c in classes:
        per_class[c] = {}
        for t in COCO_IOU_THRESHOLDS:
            pairs: list[tuple[float, bool]] = []
            num_gt = 0
            for dets, gts in zip(detections_per_image, gts_per_image):
                dets_c = [d for d in dets if d.class_id == c]
                gts_c = [g for g in gts if g.class_id == c]
                num_gt += len(gts_c)
                m = match_detections(dets_c, gts_c, t)
                pairs.extend((d.score, flag) for d, flag in zip(dets_c, m.is_tp))
            per_class[c][t] = average_precision(pairs, num_gt)

    def mean_over(thresholds) -> float:
        vals = [per_class[c][t] for c in classes for t in thresholds
                if per_class[c][t] is not None]
        return float(np.mean(vals)) if vals else 0.0

    return APResult(per_class=per_class,
                    mAP=mean_over(COCO_IOU_THRESHOLDS),
                    ap50=mean_over([0.5]),
                    ap75=mean_over([0.75]))


@dataclass
class HarmonyReport:
    gap_histogram: list[float]              # 10 proportions over |p-u| bins of 0.1
    gap_counts: list[int]
    iou_interval_counts: list[int]          # TPs per IoU interval, 0.5..1.0
    joint_samples: list[tuple[float, float]]  # raw (p, u) pairs for TPs
    mean_gap: Optional[float]
    tp_count: int
    dataset_id: str = ""
    tp_iou_threshold: float = HARMONY_TP_IOU

    @property
    def empty(self) -> bool:
        return self.tp_count == 0

    def to_dict(self) -> dict:
        return {
            "gap_histogram": self.gap_histogram,
            "gap_counts": self.gap_counts,
            "iou_interval_counts": self.iou_interval_counts,
            "joint_samples": [[p, u] for p, u in self.joint_samples],
            "mean_gap": self.mean_gap,
            "tp_count": self.tp_count,
            "dataset_id": self.dataset_id,
            "tp_iou_threshold": self.tp_iou_threshold,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HarmonyReport":
        return cls(gap_histogram=list(d["gap_histogram"]),
                   gap_counts=[int(x) for x in d["gap_counts"]],
                   iou_interval_counts=[int(x) for x in d["iou_interval_counts"]],
                   joint_samples=[(float(p), float(u)) for p, u in d["joint_samples"]],
                   mean_gap=d["mean_gap"], tp_count=int(d["tp_count"]),
                   dataset_id=d.get("dataset_id", ""),
                   tp_iou_threshold=float(d.get("tp_iou_threshold", HARMONY_TP_IOU)))


def gap_bin_index(gap: float) -> int:
    """Bins of width 0.1 over [0,1], right-open except the last."""
    return min(int(gap * GAP_BINS), GAP_BINS - 1)


def iou_interval_index(u: float) -> Optional[int]:
    for k, (lo, hi) in enumerate(IOU_INTERVALS):
        if (lo <= u < hi) or (k == len(IOU_INTERVALS) - 1 and u == hi):
            return k
    return None


def harmony_report(detections_per_image: Sequence[Sequence[Detection]],
                   gts_per_image: Sequence[Sequence[GroundTruth]],
                   dataset_id: str = "",
                   tp_iou_threshold: float = HARMONY_TP_IOU) -> HarmonyReport:
    """Joint (p, u) statistics over post-NMS true positives."""
    samples: list[tuple[float, float]] = []
    for dets, gts in zip(detections_per_image, gts_per_image):
        m = match_detections(dets, gts, tp_iou_threshold)
        for d, flag, miou in zip(dets, m.is_tp, m.match_iou):
            if flag:
                samples.append((float(d.score), float(miou)))
    samples.sort()
    counts = [0] * GAP_BINS
    interval_counts = [0] * len(IOU_INTERVALS)
    gaps = []
    for p, u in samples:
        gap = abs(p - u)
        gaps.append(gap)
        counts[gap_bin_index(gap)] += 1
        k = iou_interval_index(u)
        if k is not None:
            interval_counts[k] += 1
    tp_count = len(samples)
    if tp_count:
        hist = [c / tp_count for c in counts]
        mean_gap = float(np.mean(gaps))
    else:
        hist = [0.0] * GAP_BINS
        mean_gap = None
    return HarmonyReport(gap_histogram=hist, gap_counts=counts,
                         iou_interval_counts=interval_counts,
                         joint_samples=samples, mean_gap=mean_gap,
                         tp_count=tp_count, dataset_id=dataset_id,
                         tp_iou_threshold=tp_iou_threshold)


@dataclass
class ReportDeltas:
    interval_count_deltas: list[int]
    gap_proportion_deltas: list[float]


def compare_reports(a: HarmonyReport, b: HarmonyReport) -> ReportDeltas:
    """Per-interval and per-bin differences b - a; reports must come from the
    same evaluation set."""
    if a.dataset_id != b.dataset_id:
        raise ValueError(f"reports from different evaluation sets: "
                         f"{a.dataset_id!r} vs {b.dataset_id!r}")
    return ReportDeltas(
        interval_count_deltas=[bb - aa for aa, bb in zip(a.iou_interval_counts, b.iou_interval_counts)],
        gap_proportion_deltas=[bb - aa for aa, bb in zip(a.gap_histogram, b.gap_histogram)],
    )


# -- prediction/ground-truth file ingestion ---------------------------------


class PredictionFormatError(ValueError):
    pass


def _parse_box(raw, where: str) -> Box:
    if not (isinstance(raw, (list, tuple)) and len(raw) == 4):
        raise PredictionFormatError(f"{where}: box must be [x1,y1,x2,y2], got {raw!r}")
    x1, y1, x2, y2 = (float(v) for v in raw)
    if not (x1 < x2 and y1 < y2):
        raise PredictionFormatError(f"{where}: inverted or empty box {raw!r}")
    return Box(x1, y1, x2, y2)


def ingest_predictions(path) -> dict[str, list[Detection]]:
    """Load a prediction file: a JSON list of
    {image_id, detections: [{box, class_id, score}]}."""
    with open(path) as f:
        data = json.load(f)
    if not isinstance(data, list):
        raise PredictionFormatError("top level must be a list of image records")
    out: dict[str, list[Detection]] = {}
    for rec_i, rec in enumerate(data):
        where = f"record {rec_i}"
        if not isinstance(rec, dict) or "image_id" not in rec:
            raise PredictionFormatError(f"{where}: missing image_id")
        image_id = str(rec["image_id"])
        dets = []
        for det_i, d in enumerate(rec.get("detections", [])):
            dwhere = f"{where} (image {image_id}), detection {det_i}"
            box = _parse_box(d.get("box"), dwhere)
            score = float(d.get("score", -1))
            if not 0.0 <= score <= 1.0:
                raise PredictionFormatError(f"{dwhere}: score {score} outside [0,1]")
            dets.append(Detection(box=box, class_id=int(d["class_id"]), score=score))
        out[image_id] = dets
    return out


def ingest_ground_truths(path) -> dict[str, list[GroundTruth]]:
    """Same schema as predictions minus the score field."""
    with open(path) as f:
        data = json.load(f)
    if not isinstance(data, list):
        raise PredictionFormatError("top level must be a list of image records")
    out: dict[str, list[GroundTruth]] = {}
    for rec_i, rec in enumerate(data):
        where = f"record {rec_i}"
        if not isinstance(rec, dict) or "image_id" not in rec:
            raise PredictionFormatError(f"{where}: missing image_id")
        image_id = str(rec["image_id"])
        gts = []
        for gt_i, g in enumerate(rec.get("detections", [])):
            box = _parse_box(g.get("box"), f"{where} (image {image_id}), entry {gt_i}")
            gts.append(GroundTruth(box=box, class_id=int(g["class_id"])))
        out[image_id] = gts
    return out


def export_predictions(detections_per_image: dict[str, Sequence[Detection]], path):
    data = [{"image_id": image_id,
             "detections": [{"box": [d.box.x1, d.box.y1, d.box.x2, d.box.y2],
                             "class_id": d.class_id, "score": d.score}
                            for d in dets]}
            for image_id, dets in detections_per_image.items()]
    with open(path, "w") as f:
        json.dump(data, f, indent=1)


def export_report_csv(report: HarmonyReport, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["kind", "label", "count", "proportion"])
        for i, (c, h) in enumerate(zip(report.gap_counts, report.gap_histogram)):
            w.writerow(["gap_bin", f"[{i/10:.1f},{(i+1)/10:.1f})", c, f"{h:.6f}"])
        for (lo, hi), c in zip(IOU_INTERVALS, report.iou_interval_counts):
            w.writerow(["iou_interval", f"[{lo:.1f},{hi:.1f})", c, ""])


def export_report_json(report: HarmonyReport, path):
    with open(path, "w") as f:
        json.dump(report.to_dict(), f, indent=1)
