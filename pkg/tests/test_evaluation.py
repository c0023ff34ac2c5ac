"""Tests for matching, AP, mAP, AIB and the report tables."""

import math

import numpy as np
import pandas as pd
import pytest

from config.constants import ObjectClass, OcclusionLevel, RangeLevel
from models.geometry import Box3D
from models.scene import Detection, DifficultyTag, GroundTruth
from services.evaluation import (
    UNDEFINED, EvaluationReport, PolicyEvaluation, PRCurve, aib, average_precision,
    build_pr_curve, evaluate_frames, interpolated_precision, map_over_classes, match_detections
)
from utils.errors import ValidationError

CAR = ObjectClass.CAR
TRUCK = ObjectClass.TRUCK
EASY_NEAR = DifficultyTag(OcclusionLevel.EASY, RangeLevel.NEAR)
MODERATE_FAR = DifficultyTag(OcclusionLevel.MODERATE, RangeLevel.FAR)

LEARN2COM_BYTES = 64 + 64 * 128 * 144 * 4


def box(x, y=0.0):
    return Box3D((x, y, -1.0), (1.6, 3.9, 1.56), 0.0)


def truth(object_id, x, object_class=CAR, tag=EASY_NEAR):
    return GroundTruth(object_id, box(x), object_class, tag)


def pred(x, score, object_class=CAR):
    return Detection(box(x), object_class, score)


def brute_force_ap(scores, hits, num_gt):
    """Integrate interpolated precision over recall steps of 1/num_gt."""
    scores, hits = np.asarray(scores), np.asarray(hits, dtype=bool)
    points = []
    for threshold in np.unique(scores):
        kept = scores >= threshold
        tp = hits[kept].sum()
        points.append((tp / num_gt, tp / kept.sum()))
    total = 0.0
    for m in range(1, num_gt + 1):
        level = m / num_gt
        total += max((p for r, p in points if r >= level - 1e-12), default=0.0) / num_gt
    return total


class TestMatching:
    def test_perfect_predictions(self):
        gts = [truth(0, 0.0), truth(1, 10.0)]
        result = match_detections([pred(0.0, 0.9), pred(10.0, 0.8)], gts, CAR)
        assert result.tp_count == 2
        assert result.fp_count == 0
        assert result.gt_matched == {0: True, 1: True}
        assert result.recall == 1.0

    def test_no_predictions(self):
        result = match_detections([], [truth(0, 0.0)], CAR)
        assert result.tp_count == 0
        assert result.recall == 0.0
        assert result.gt_matched == {0: False}

    def test_higher_score_wins_single_truth(self):
        # the lower-scored prediction overlaps better but comes second
        result = match_detections([pred(0.0, 0.5), pred(0.1, 0.9)], [truth(0, 0.0)], CAR)
        assert list(result.scores) == [0.9, 0.5]
        assert list(result.true_positive) == [True, False]
        assert result.matched_gt == [0, None]
        assert result.fp_count == 1

    def test_best_iou_among_unmatched(self):
        gts = [truth(0, 0.0), truth(1, 0.2)]
        result = match_detections([pred(0.18, 0.9)], gts, CAR)
        assert result.matched_gt == [1]

    def test_low_iou_is_false_positive(self):
        result = match_detections([pred(10.0, 0.9)], [truth(0, 0.0)], CAR)
        assert result.fp_count == 1
        assert result.matched_gt == [None]

    def test_other_class_skipped(self):
        result = match_detections([pred(0.0, 0.9, TRUCK)], [truth(0, 0.0)], CAR)
        assert len(result.scores) == 0
        assert result.num_gt == 1

    def test_score_threshold(self):
        result = match_detections([pred(0.0, 0.3)], [truth(0, 0.0)], CAR, score_threshold=0.5)
        assert len(result.scores) == 0

    def test_each_truth_matched_once(self):
        rng = np.random.default_rng(5)
        gts = [truth(i, 6.0 * i) for i in range(5)]
        preds = [pred(6.0 * int(rng.integers(5)) + rng.uniform(-0.1, 0.1), rng.uniform()) for _ in range(20)]
        result = match_detections(preds, gts, CAR)
        matched = [m for m in result.matched_gt if m is not None]
        assert len(matched) == len(set(matched))
        assert result.tp_count == len(matched) <= 5

    def test_bucket_ignores_other_difficulties(self):
        gts = [truth(0, 0.0, tag=EASY_NEAR), truth(1, 10.0, tag=MODERATE_FAR)]
        result = match_detections([pred(0.0, 0.9), pred(10.0, 0.8)], gts, CAR, bucket='moderate')
        assert result.num_gt == 1
        assert list(result.true_positive) == [False, True]
        assert list(result.ignored) == [True, False]
        assert result.fp_count == 0
        assert result.gt_matched == {1: True}

    @pytest.mark.parametrize('threshold', [0.0, 1.5])
    def test_invalid_iou_threshold(self, threshold):
        with pytest.raises(ValidationError):
            match_detections([], [], CAR, iou_threshold=threshold)

    def test_unknown_bucket(self):
        with pytest.raises(ValidationError):
            match_detections([pred(0.0, 0.9)], [truth(0, 0.0)], CAR, bucket='medium')


class TestAveragePrecision:
    def test_single_correct_prediction(self):
        curve = build_pr_curve(match_detections([pred(0.0, 0.7)], [truth(0, 0.0)], CAR))
        assert average_precision(curve) == 1.0

    def test_tp_fp_tp(self):
        gts = [truth(0, 0.0), truth(1, 10.0)]
        preds = [pred(0.0, 0.9), pred(40.0, 0.8), pred(10.0, 0.7)]
        curve = build_pr_curve(match_detections(preds, gts, CAR))
        np.testing.assert_allclose(curve.recalls, [0.5, 0.5, 1.0])
        np.testing.assert_allclose(curve.precisions, [1.0, 0.5, 2 / 3])
        np.testing.assert_allclose(interpolated_precision(curve), [1.0, 2 / 3, 2 / 3])
        assert average_precision(curve) == pytest.approx(5 / 6)

    def test_all_false_positives(self):
        curve = build_pr_curve(match_detections([pred(30.0, 0.9), pred(50.0, 0.4)], [truth(0, 0.0)], CAR))
        assert average_precision(curve) == 0.0

    def test_no_truth_is_nan(self):
        curve = build_pr_curve(match_detections([pred(0.0, 0.9)], [], CAR))
        assert math.isnan(average_precision(curve))

    def test_truth_without_predictions_is_zero(self):
        curve = build_pr_curve(match_detections([], [truth(0, 0.0)], CAR))
        assert average_precision(curve) == 0.0

    def test_tied_scores_share_cutoff(self):
        gts = [truth(0, 0.0), truth(1, 10.0)]
        first = [pred(0.0, 0.5), pred(40.0, 0.5), pred(10.0, 0.5)]
        second = [pred(40.0, 0.5), pred(10.0, 0.5), pred(0.0, 0.5)]
        curve_a = build_pr_curve(match_detections(first, gts, CAR))
        curve_b = build_pr_curve(match_detections(second, gts, CAR))
        assert len(curve_a) == 1
        assert average_precision(curve_a) == average_precision(curve_b) == pytest.approx(2 / 3)

    def test_frames_accumulate(self):
        frame_a = match_detections([pred(0.0, 0.9)], [truth(0, 0.0)], CAR)
        frame_b = match_detections([pred(40.0, 0.8), pred(10.0, 0.7)], [truth(1, 10.0)], CAR)
        curve = build_pr_curve([frame_a, frame_b])
        assert curve.num_gt == 2
        assert average_precision(curve) == pytest.approx(5 / 6)

    def test_monotone_rescaling(self):
        rng = np.random.default_rng(2)
        gts = [truth(i, 6.0 * i) for i in range(6)]
        preds = [pred(6.0 * int(rng.integers(8)), float(rng.uniform(0.05, 1.0))) for _ in range(12)]
        squared = [Detection(p.box, p.object_class, p.score ** 2) for p in preds]
        ap = average_precision(build_pr_curve(match_detections(preds, gts, CAR)))
        ap_squared = average_precision(build_pr_curve(match_detections(squared, gts, CAR)))
        assert ap == pytest.approx(ap_squared, abs=1e-12)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(17)
        for _ in range(500):
            num_gt = int(rng.integers(1, 11))
            count = int(rng.integers(1, 21))
            scores = np.round(rng.uniform(size=count), 1)
            hits = rng.random(count) < 0.5
            hits[np.cumsum(hits) > num_gt] = False
            order = np.argsort(-scores, kind='stable')
            s, h = scores[order], hits[order]
            cutoffs = np.flatnonzero(np.append(s[1:] != s[:-1], True))
            tp = np.cumsum(h)[cutoffs]
            curve = PRCurve(tp / num_gt, tp / (cutoffs + 1), num_gt, s[cutoffs])
            assert average_precision(curve) == pytest.approx(brute_force_ap(scores, hits, num_gt), abs=1e-9)

    def test_interpolation_non_increasing(self):
        curve = PRCurve(np.array([0.2, 0.4, 0.4, 0.8]), np.array([0.5, 1.0, 0.3, 0.6]), 5)
        interp = interpolated_precision(curve)
        assert np.all(np.diff(interp) <= 0)
        assert 0.0 <= average_precision(curve) <= 1.0


class TestMapAndAib:
    @pytest.mark.parametrize('car, truck, expected', [
        (93.03, 92.33, 92.68),
        (88.42, 91.16, 89.79),
    ])
    def test_map_is_mean(self, car, truck, expected):
        assert map_over_classes({CAR: car, TRUCK: truck}) == pytest.approx(expected)

    def test_single_class(self):
        assert map_over_classes([0.75]) == 0.75

    def test_nan_class_left_out(self):
        assert map_over_classes({CAR: 0.8, TRUCK: float('nan')}) == 0.8
        assert math.isnan(map_over_classes([float('nan')]))

    def test_no_classes(self):
        with pytest.raises(ValidationError):
            map_over_classes({})

    @pytest.mark.parametrize('with_comm, without, kb, expected', [
        (91.93, 88.12, 4608, 0.85),
        (91.07, 88.12, 13824, 0.22),
        (92.68, 88.12, 4608.0625, 1.01),
        (93.03, 89.79, 4608, 0.72),
        (94.28, 89.79, 9216, 0.50),
        (95.16, 89.79, 4608.0625, 1.19),
    ])
    def test_bandwidth_table_cells(self, with_comm, without, kb, expected):
        assert aib(with_comm, without, kb * 1024) == pytest.approx(expected, abs=0.01)

    def test_equal_accuracy(self):
        assert aib(90.0, 90.0, 1024) == 0.0

    def test_absolute_difference(self):
        assert aib(80.0, 90.0, 1024 * 1024) == pytest.approx(10.0)

    def test_zero_bandwidth(self):
        with pytest.raises(ValidationError):
            aib(92.0, 88.0, 0)


def roundabout_moderate(car, truck):
    return {('moderate', CAR): car, ('moderate', TRUCK): truck}


class TestReport:
    @pytest.fixture
    def report(self):
        evaluations = [
            PolicyEvaluation('LocVehicle', roundabout_moderate(0.8567, 0.9057), frames=4),
            PolicyEvaluation('Learn2com', roundabout_moderate(0.9303, 0.9233),
                             bytes_per_frame=LEARN2COM_BYTES, gross_bytes_per_frame=LEARN2COM_BYTES + 200,
                             mean_latency=0.4, frames=4),
        ]
        return EvaluationReport(evaluations, aib_bucket='moderate', buckets=['moderate'])

    def test_baseline_is_loc_vehicle(self, report):
        assert report.baseline.policy == 'LocVehicle'

    def test_aib(self, report):
        loc, learn = report.evaluations
        assert report.aib_of(loc) == UNDEFINED
        assert report.aib_of(learn) == pytest.approx(1.01, abs=0.01)

    def test_map_table(self, report):
        table = report.map_table()
        assert list(table.columns) == ['policy', 'difficulty', 'map']
        values = dict(zip(table['policy'], table['map']))
        assert values['LocVehicle'] == pytest.approx(88.12)
        assert values['Learn2com'] == pytest.approx(92.68)

    def test_bandwidth_table(self, report):
        table = report.bandwidth_table().set_index('policy')
        assert table.loc['Learn2com', 'kb_per_frame'] == pytest.approx(4608.0625)
        assert table.loc['Learn2com', 'kb_display'] == '4608.06'
        assert table.loc['LocVehicle', 'aib'] == UNDEFINED

    def test_detection_table_rows(self, report):
        table = report.detection_table()
        assert len(table) == 4
        assert set(table['class']) == {'car', 'truck'}

    def test_write(self, report, tmp_path):
        paths = report.write(tmp_path / 'reports')
        assert len(paths) == 4
        assert all(path.exists() for path in paths)
        bandwidth = pd.read_csv(tmp_path / 'reports' / 'bandwidth.csv')
        assert list(bandwidth['policy']) == ['LocVehicle', 'Learn2com']

    def test_format_table(self, report):
        text = report.format_table()
        assert 'Learn2com' in text
        assert '92.68' in text

    def test_no_baseline(self):
        report = EvaluationReport([PolicyEvaluation('CombAll', roundabout_moderate(0.9, 0.9), bytes_per_frame=10)])
        assert report.aib_of(report.evaluations[0]) == UNDEFINED


class TestEvaluateFrames:
    def test_perfect_detections(self):
        gts = [truth(0, 0.0), truth(1, 10.0, TRUCK, MODERATE_FAR)]
        preds = [pred(0.0, 0.9), pred(10.0, 0.8, TRUCK)]
        table = evaluate_frames([(preds, gts)])
        assert table[('all', CAR)] == 1.0
        assert table[('all', TRUCK)] == 1.0
        assert table[('easy', CAR)] == 1.0
        assert math.isnan(table[('easy', TRUCK)])
        assert table[('far', TRUCK)] == 1.0
        assert math.isnan(table[('hard', CAR)])

    def test_policy_map(self):
        evaluation = PolicyEvaluation('CombAll', {('all', CAR): 1.0, ('all', TRUCK): float('nan'),
                                                  ('easy', CAR): 0.5, ('easy', TRUCK): 0.7})
        assert evaluation.map('all') == 1.0
        assert evaluation.map('easy') == pytest.approx(0.6)
