import json

import numpy as np
import pytest

from harmonyqat.detector import Box, Detection, GroundTruth
from harmonyqat.evaluation import (COCO_IOU_THRESHOLDS, HarmonyReport,
                                   PredictionFormatError, average_precision,
                                   compare_reports, export_predictions,
                                   export_report_csv, export_report_json,
                                   gap_bin_index, harmony_report,
                                   ingest_ground_truths, ingest_predictions,
                                   iou_interval_index, map_coco,
                                   match_detections)


def det(x1, y1, x2, y2, cls=0, score=0.9):
    return Detection(Box(x1, y1, x2, y2), cls, score)


def gt(x1, y1, x2, y2, cls=0):
    return GroundTruth(Box(x1, y1, x2, y2), cls)


class TestMatching:
    def test_perfect_match(self):
        m = match_detections([det(0, 0, 10, 10)], [gt(0, 0, 10, 10)], 0.5)
        assert m.is_tp == [True]
        assert m.match_iou == [1.0]

    def test_below_threshold_is_fp(self):
        m = match_detections([det(0, 0, 10, 10)], [gt(8, 8, 18, 18)], 0.5)
        assert m.is_tp == [False]
        assert m.matched_gt == [-1]

    def test_class_mismatch_is_fp(self):
        m = match_detections([det(0, 0, 10, 10, cls=1)], [gt(0, 0, 10, 10, cls=0)], 0.5)
        assert m.is_tp == [False]

    def test_each_gt_claimed_once(self):
        dets = [det(0, 0, 10, 10, score=0.9), det(1, 1, 11, 11, score=0.8)]
        m = match_detections(dets, [gt(0, 0, 10, 10)], 0.5)
        assert m.is_tp == [True, False]

    def test_higher_score_matches_first(self):
        # the lower-scored detection overlaps the gt better, but the
        # higher-scored one claims it first
        dets = [det(0, 0, 10, 10, score=0.9), det(0, 0, 10, 9, score=0.95)]
        m = match_detections(dets, [gt(0, 0, 10, 10)], 0.5)
        assert m.is_tp == [False, True]

    def test_best_iou_gt_chosen(self):
        gts = [gt(0, 0, 10, 10), gt(0, 0, 10, 8)]
        m = match_detections([det(0, 0, 10, 10)], gts, 0.5)
        assert m.matched_gt == [0]
        assert m.match_iou == [1.0]


def brute_force_ap(pairs, num_gt):
    """Independent AP reference: explicit PR points, right-to-left precision
    envelope, then sample the 101 recall values."""
    if num_gt == 0:
        return None if not pairs else 0.0
    ranked = sorted(pairs, key=lambda sv: -sv[0])
    points = []  # (recall, precision) after each prefix
    tp = fp = 0
    for _, flag in ranked:
        tp += flag
        fp += not flag
        points.append((tp / num_gt, tp / (tp + fp)))
    total = 0.0
    for r in np.linspace(0, 1, 101):
        best = 0.0
        for rec, prec in points:
            if rec >= r - 1e-12:
                best = max(best, prec)
        total += best
    return total / 101


class TestAveragePrecision:
    def test_perfect_single(self):
        assert average_precision([(0.9, True)], 1) == pytest.approx(1.0)

    def test_hand_trace_half(self):
        # 2 gts; 1 TP at high score then 1 FP: recall caps at 0.5 with
        # precision 1 there, zero beyond
        ap = average_precision([(0.9, True), (0.8, False)], 2)
        # recall grid points <= 0.5: r=0.00..0.50 -> 51 points at precision 1
        assert ap == pytest.approx(51 / 101)

    def test_no_gt_no_dets_excluded(self):
        assert average_precision([], 0) is None

    def test_no_gt_with_dets_is_zero(self):
        assert average_precision([(0.9, False)], 0) == 0.0

    def test_no_dets_is_zero(self):
        assert average_precision([], 3) == 0.0

    def test_matches_brute_force_200_random(self):
        rng = np.random.default_rng(17)
        for _ in range(200):
            num_gt = int(rng.integers(1, 8))
            n = int(rng.integers(0, 12))
            tps = 0
            pairs = []
            for _ in range(n):
                flag = bool(rng.integers(2)) and tps < num_gt
                tps += flag
                pairs.append((float(np.round(rng.uniform(), 2)), flag))
            got = average_precision(pairs, num_gt)
            want = brute_force_ap(pairs, num_gt)
            assert got == pytest.approx(want, abs=1e-12)


class TestMapCoco:
    def test_perfect_detections(self):
        gts = [[gt(5, 5, 20, 20, 0), gt(30, 30, 50, 50, 1)]]
        dets = [[det(5, 5, 20, 20, 0, 0.9), det(30, 30, 50, 50, 1, 0.8)]]
        res = map_coco(dets, gts)
        assert res.mAP == pytest.approx(1.0)
        assert res.ap50 == pytest.approx(1.0)

    def test_empty_detections(self):
        res = map_coco([[]], [[gt(5, 5, 20, 20)]])
        assert res.mAP == 0.0

    def test_ap50_at_least_map(self):
        rng = np.random.default_rng(3)
        gts, dets = [], []
        for _ in range(10):
            img_gts, img_dets = [], []
            for _ in range(int(rng.integers(1, 4))):
                x1, y1 = rng.uniform(0, 30, 2)
                w, h = rng.uniform(5, 20, 2)
                c = int(rng.integers(2))
                img_gts.append(gt(x1, y1, x1 + w, y1 + h, c))
                jx, jy = rng.uniform(-3, 3, 2)
                img_dets.append(det(x1 + jx, y1 + jy, x1 + w + jx, y1 + h + jy,
                                    c, float(rng.uniform(0.3, 1.0))))
            gts.append(img_gts)
            dets.append(img_dets)
        res = map_coco(dets, gts)
        assert res.ap50 >= res.mAP >= 0.0

    def test_moderate_iou_drops_high_thresholds(self):
        # IoU of this pair is 0.74: TP at thresholds up to 0.70 only
        dets = [[det(0, 0, 10, 10, 0, 0.9)]]
        gts = [[gt(0, 0, 10, 7.4)]]
        res = map_coco(dets, gts)
        assert res.per_class[0][0.5] == pytest.approx(1.0)
        assert res.per_class[0][0.7] == pytest.approx(1.0)
        assert res.per_class[0][0.75] == pytest.approx(0.0)
        assert res.mAP == pytest.approx(0.5)

    def test_mismatched_lengths(self):
        with pytest.raises(ValueError):
            map_coco([[]], [[], []])

    def test_threshold_grid(self):
        assert COCO_IOU_THRESHOLDS == [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95]


class TestBinning:
    def test_gap_bins(self):
        assert gap_bin_index(0.0) == 0
        assert gap_bin_index(0.05) == 0
        assert gap_bin_index(0.1) == 1
        assert gap_bin_index(0.999) == 9
        assert gap_bin_index(1.0) == 9

    def test_iou_intervals(self):
        assert iou_interval_index(0.5) == 0
        assert iou_interval_index(0.59) == 0
        assert iou_interval_index(0.6) == 1
        assert iou_interval_index(0.95) == 4
        assert iou_interval_index(1.0) == 4
        assert iou_interval_index(0.49) is None


class TestHarmonyReport:
    def test_single_tp(self):
        dets = [[det(0, 0, 10, 10, score=0.85)]]
        gts = [[gt(0, 0, 10, 10)]]
        rep = harmony_report(dets, gts, dataset_id="d")
        assert rep.tp_count == 1
        assert rep.joint_samples == [(0.85, 1.0)]
        assert rep.mean_gap == pytest.approx(0.15)
        assert rep.gap_counts[1] == 1 and sum(rep.gap_counts) == 1
        assert rep.iou_interval_counts == [0, 0, 0, 0, 1]

    def test_empty(self):
        rep = harmony_report([[]], [[gt(0, 0, 10, 10)]])
        assert rep.empty
        assert rep.mean_gap is None
        assert rep.gap_histogram == [0.0] * 10

    def test_histogram_sums_to_one(self):
        rng = np.random.default_rng(5)
        dets, gts = [], []
        for _ in range(20):
            x1, y1 = rng.uniform(0, 30, 2)
            w, h = rng.uniform(8, 20, 2)
            gts.append([gt(x1, y1, x1 + w, y1 + h)])
            dets.append([det(x1 + 1, y1 + 1, x1 + w + 1, y1 + h + 1,
                             score=float(rng.uniform(0.1, 1.0)))])
        rep = harmony_report(dets, gts)
        assert rep.tp_count > 0
        assert sum(rep.gap_histogram) == pytest.approx(1.0)
        assert sum(rep.gap_counts) == rep.tp_count

    def test_round_trip_dict(self):
        rep = harmony_report([[det(0, 0, 10, 10, score=0.7)]],
                             [[gt(0, 0, 10, 10)]], dataset_id="x")
        again = HarmonyReport.from_dict(json.loads(json.dumps(rep.to_dict())))
        assert again == rep

    def test_compare_reports(self):
        a = harmony_report([[det(0, 0, 10, 10, score=0.7)]],
                           [[gt(0, 0, 10, 10)]], dataset_id="x")
        b = harmony_report([[det(0, 0, 10, 10, score=0.95)]],
                           [[gt(0, 0, 10, 10)]], dataset_id="x")
        deltas = compare_reports(a, b)
        assert sum(deltas.interval_count_deltas) == 0
        assert deltas.gap_proportion_deltas[0] == pytest.approx(1.0)  # gap 0.05 vs 0.3
        assert deltas.gap_proportion_deltas[3] == pytest.approx(-1.0)

    def test_compare_reports_dataset_mismatch(self):
        a = harmony_report([[]], [[]], dataset_id="x")
        b = harmony_report([[]], [[]], dataset_id="y")
        with pytest.raises(ValueError):
            compare_reports(a, b)


class TestIngestion:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "preds.json"
        data = {"img0": [det(1, 2, 3, 4, cls=1, score=0.5)], "img1": []}
        export_predictions(data, path)
        again = ingest_predictions(path)
        assert again == data

    def test_ground_truth_ingest(self, tmp_path):
        path = tmp_path / "gts.json"
        path.write_text(json.dumps([
            {"image_id": "a",
             "detections": [{"box": [0, 0, 5, 5], "class_id": 2}]},
        ]))
        out = ingest_ground_truths(path)
        assert out == {"a": [gt(0, 0, 5, 5, 2)]}

    def test_missing_image_id(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps([{"detections": []}]))
        with pytest.raises(PredictionFormatError, match="record 0"):
            ingest_predictions(path)

    def test_inverted_box(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps([
            {"image_id": "a",
             "detections": [{"box": [5, 0, 1, 5], "class_id": 0, "score": 0.5}]}]))
        with pytest.raises(PredictionFormatError, match="image a"):
            ingest_predictions(path)

    def test_score_out_of_range(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps([
            {"image_id": "a",
             "detections": [{"box": [0, 0, 1, 1], "class_id": 0, "score": 1.5}]}]))
        with pytest.raises(PredictionFormatError, match="score"):
            ingest_predictions(path)

    def test_top_level_not_list(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"image_id": "a"}))
        with pytest.raises(PredictionFormatError):
            ingest_predictions(path)

    def test_report_exports(self, tmp_path):
        rep = harmony_report([[det(0, 0, 10, 10, score=0.7)]],
                             [[gt(0, 0, 10, 10)]], dataset_id="x")
        export_report_csv(rep, tmp_path / "r.csv")
        export_report_json(rep, tmp_path / "r.json")
        lines = (tmp_path / "r.csv").read_text().strip().splitlines()
        assert lines[0] == "kind,label,count,proportion"
        assert len(lines) == 1 + 10 + 5
        loaded = HarmonyReport.from_dict(json.loads((tmp_path / "r.json").read_text()))
        assert loaded == rep
