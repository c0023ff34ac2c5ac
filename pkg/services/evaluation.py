"""
Detection Evaluation

Greedy IoU matching, precision/recall curves, interpolated average
precision, mAP over classes, the accuracy-improvement-to-bandwidth metric
and the report tables built from them.

AP is kept in [0, 1] internally and reported on a 0-100 scale. Recall
levels come from successive score cutoffs; predictions with equal scores
share one cutoff, so the result does not depend on the order frames are
accumulated in.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from config.constants import DETECTED_CLASSES, PATHS, UNITS, ObjectClass, PolicyName
from config.experiment import BUCKETS
from config.settings import Config
from models.geometry import iou_3d
from models.scene import Detection, GroundTruth
from utils.common import format_kb
from utils.errors import ValidationError
from utils.logging import get_logger

logger = get_logger(__name__)

UNDEFINED = 'undefined'


def in_bucket(truth: GroundTruth, bucket: str) -> bool:
    if bucket == 'all':
        return True
    if bucket in ('easy', 'moderate', 'hard'):
        return truth.tag.occlusion.value == bucket
    if bucket in ('near', 'far'):
        return truth.tag.range.value == bucket
    raise ValidationError(f"unknown difficulty bucket {bucket!r}; valid: {', '.join(BUCKETS)}")


# ============= Matching =============

@dataclass
class MatchResult:
    """
    Matches of one class in one frame.

    Predictions are in descending score order. A prediction matched to a
    ground truth outside the bucket is ignored: neither TP nor FP.
    """
    object_class: ObjectClass
    scores: np.ndarray
    true_positive: np.ndarray
    ignored: np.ndarray
    matched_gt: List[Optional[int]]
    gt_matched: Dict[int, bool]
    num_gt: int
    iou_threshold: float
    score_threshold: float = 0.0

    @property
    def tp_count(self) -> int:
        return int(self.true_positive.sum())

    @property
    def fp_count(self) -> int:
        return int((~self.true_positive & ~self.ignored).sum())

    @property
    def recall(self) -> float:
        return self.tp_count / self.num_gt if self.num_gt else float('nan')


def match_detections(
    preds: Sequence[Detection],
    gts: Sequence[GroundTruth],
    object_class: ObjectClass,
    iou_threshold: float = 0.7,
    score_threshold: float = 0.0,
    bucket: str = 'all'
) -> MatchResult:
    """
    Greedy matching of one class.

    Each prediction, highest score first, takes the unmatched ground truth
    of its class with the highest 3D IoU, provided the IoU reaches the
    threshold.

    Args:
        preds: Detections (any class; other classes are skipped)
        gts: Ground truths (any class)
        object_class: Class to evaluate
        iou_threshold: sigma in (0, 1]
        score_threshold: delta; lower-scored predictions are dropped
        bucket: Difficulty bucket deciding which ground truths count

    Returns:
        MatchResult
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValidationError(f"iou threshold must be in (0, 1], got {iou_threshold}")

    candidates = [p for p in preds if p.object_class is object_class and p.score >= score_threshold]
    order = np.argsort(-np.array([p.score for p in candidates], dtype=np.float64), kind='stable')
    candidates = [candidates[i] for i in order]
    truths = [g for g in gts if g.object_class is object_class]
    counted = [in_bucket(g, bucket) for g in truths]

    taken = np.zeros(len(truths), dtype=bool)
    true_positive = np.zeros(len(candidates), dtype=bool)
    ignored = np.zeros(len(candidates), dtype=bool)
    matched_gt: List[Optional[int]] = []

    for index, pred in enumerate(candidates):
        best, best_iou = -1, iou_threshold
        for j, truth in enumerate(truths):
            if taken[j]:
                continue
            overlap = iou_3d(pred.box, truth.box)
            if overlap >= best_iou and (best < 0 or overlap > best_iou):
                best, best_iou = j, overlap
        if best < 0:
            matched_gt.append(None)
            continue
        taken[best] = True
        matched_gt.append(truths[best].object_id)
        if counted[best]:
            true_positive[index] = True
        else:
            ignored[index] = True

    return MatchResult(
        object_class=object_class,
        scores=np.array([p.score for p in candidates], dtype=np.float64),
        true_positive=true_positive,
        ignored=ignored,
        matched_gt=matched_gt,
        gt_matched={t.object_id: bool(taken[j]) for j, t in enumerate(truths) if counted[j]},
        num_gt=int(sum(counted)),
        iou_threshold=iou_threshold,
        score_threshold=score_threshold,
    )


# ============= Precision / Recall =============

@dataclass
class PRCurve:
    """Recall and precision at each score cutoff, highest cutoff first."""
    recalls: np.ndarray
    precisions: np.ndarray
    num_gt: int
    thresholds: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return len(self.recalls)


def build_pr_curve(results: Union[MatchResult, Sequence[MatchResult]]) -> PRCurve:
    """Accumulate matches (typically one per frame) into one curve."""
    if isinstance(results, MatchResult):
        results = [results]
    num_gt = sum(r.num_gt for r in results)
    if not results:
        return PRCurve(np.zeros(0), np.zeros(0), 0)

    scores = np.concatenate([r.scores[~r.ignored] for r in results])
    hits = np.concatenate([r.true_positive[~r.ignored] for r in results])
    if len(scores) == 0:
        return PRCurve(np.zeros(0), np.zeros(0), num_gt)

    order = np.argsort(-scores, kind='stable')
    scores, hits = scores[order], hits[order]
    cumulative_tp = np.cumsum(hits)
    ranks = np.arange(1, len(hits) + 1)

    # last prediction of every run of equal scores
    cutoffs = np.flatnonzero(np.append(scores[1:] != scores[:-1], True))
    recalls = cumulative_tp[cutoffs] / num_gt if num_gt else np.zeros(len(cutoffs))
    precisions = cumulative_tp[cutoffs] / ranks[cutoffs]
    return PRCurve(recalls.astype(np.float64), precisions.astype(np.float64), num_gt, scores[cutoffs])


def interpolated_precision(curve: PRCurve) -> np.ndarray:
    """e_interp at every curve point: the best precision at that recall or beyond."""
    if len(curve) == 0:
        return np.zeros(0)
    return np.maximum.accumulate(curve.precisions[::-1])[::-1]


def average_precision(curve: PRCurve) -> float:
    """
    Sum over cutoffs of e_interp(r_k) * (r_k - r_{k-1}), with r_0 = 0.

    Returns:
        AP in [0, 1]; NaN when the curve has no ground truth; 0 when it has
        ground truth but no predictions
    """
    if curve.num_gt == 0:
        return float('nan')
    if len(curve) == 0:
        return 0.0
    steps = np.diff(np.concatenate([[0.0], curve.recalls]))
    return float(np.sum(interpolated_precision(curve) * steps))


def map_over_classes(per_class_ap: Union[Mapping, Sequence[float]]) -> float:
    """
    Arithmetic mean of per-class APs; classes with NaN AP are left out.

    Raises:
        ValidationError: If no class is given
    """
    values = list(per_class_ap.values()) if isinstance(per_class_ap, Mapping) else list(per_class_ap)
    if not values:
        raise ValidationError("mAP needs at least one class")
    defined = [float(v) for v in values if not math.isnan(float(v))]
    if not defined:
        return float('nan')
    return float(np.mean(defined))


def aib(ap_with: float, ap_without: float, bytes_per_frame: float) -> float:
    """
    Accuracy improvement per MB of bandwidth per frame.

    Raises:
        ValidationError: If bytes_per_frame <= 0
    """
    if not bytes_per_frame > 0:
        raise ValidationError(f"AIB undefined for bandwidth {bytes_per_frame} bytes/frame")
    return abs(ap_with - ap_without) / (bytes_per_frame / UNITS['MB'])


# ============= Per-Policy Evaluation =============

FramePair = Tuple[Sequence[Detection], Sequence[GroundTruth]]


def evaluate_frames(
    frames: Sequence[FramePair],
    iou_threshold: float = 0.7,
    classes: Sequence[ObjectClass] = DETECTED_CLASSES,
    buckets: Sequence[str] = BUCKETS
) -> Dict[Tuple[str, ObjectClass], float]:
    """AP in [0, 1] for every (bucket, class)."""
    table = {}
    for bucket in buckets:
        for object_class in classes:
            results = [
                match_detections(preds, gts, object_class, iou_threshold, bucket=bucket)
                for preds, gts in frames
            ]
            table[(bucket, object_class)] = average_precision(build_pr_curve(results))
    return table


@dataclass
class PolicyEvaluation:
    """Accuracy and cost of one policy over a split."""
    policy: str
    ap: Dict[Tuple[str, ObjectClass], float]
    bytes_per_frame: float = 0.0
    gross_bytes_per_frame: float = 0.0
    mean_latency: float = 0.0
    frames: int = 0

    def map(self, bucket: str = 'all') -> float:
        return map_over_classes({c: v for (b, c), v in self.ap.items() if b == bucket})


def _percent(value: float) -> float:
    return value * 100.0


class EvaluationReport:
    """
    Report tables over several policies.

    AIB compares each policy's mAP in `aib_bucket` against the
    no-communication baseline.
    """

    def __init__(self, evaluations: Sequence[PolicyEvaluation], baseline: Optional[PolicyEvaluation] = None,
                 aib_bucket: str = 'moderate', buckets: Sequence[str] = BUCKETS):
        self.evaluations = list(evaluations)
        self.baseline = baseline or next(
            (e for e in self.evaluations if e.policy == PolicyName.LOC_VEHICLE.value), None
        )
        self.aib_bucket = aib_bucket
        self.buckets = list(buckets)

    def aib_of(self, evaluation: PolicyEvaluation) -> Union[float, str]:
        if self.baseline is None or evaluation.bytes_per_frame <= 0:
            return UNDEFINED
        gain_with = _percent(evaluation.map(self.aib_bucket))
        gain_without = _percent(self.baseline.map(self.aib_bucket))
        if math.isnan(gain_with) or math.isnan(gain_without):
            return UNDEFINED
        return aib(gain_with, gain_without, evaluation.bytes_per_frame)

    @staticmethod
    def _format_aib(value: Union[float, str]) -> str:
        return value if isinstance(value, str) else Config.REPORT_FLOAT_FORMAT % value

    def detection_table(self) -> pd.DataFrame:
        rows = [
            {'policy': e.policy, 'class': object_class.value, 'difficulty': bucket, 'ap': _percent(value)}
            for e in self.evaluations
            for (bucket, object_class), value in e.ap.items()
        ]
        return pd.DataFrame(rows, columns=['policy', 'class', 'difficulty', 'ap'])

    def map_table(self) -> pd.DataFrame:
        rows = [
            {'policy': e.policy, 'difficulty': bucket, 'map': _percent(e.map(bucket))}
            for e in self.evaluations for bucket in self.buckets
        ]
        return pd.DataFrame(rows, columns=['policy', 'difficulty', 'map'])

    def bandwidth_table(self) -> pd.DataFrame:
        rows = []
        for e in self.evaluations:
            rows.append({
                'policy': e.policy,
                'bytes_per_frame': e.bytes_per_frame,
                'kb_per_frame': e.bytes_per_frame / UNITS['KB'],
                'kb_display': format_kb(e.bytes_per_frame),
                'gross_bytes_per_frame': e.gross_bytes_per_frame,
                'mean_latency_s': e.mean_latency,
                'map': _percent(e.map(self.aib_bucket)),
                'aib': self._format_aib(self.aib_of(e)),
            })
        return pd.DataFrame(rows, columns=[
            'policy', 'bytes_per_frame', 'kb_per_frame', 'kb_display',
            'gross_bytes_per_frame', 'mean_latency_s', 'map', 'aib',
        ])

    def plot_data(self) -> pd.DataFrame:
        table = self.map_table()
        return table.rename(columns={'map': 'mAP'})

    def write(self, directory: Union[str, Path]) -> List[Path]:
        """Write every table as CSV; returns the paths written."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        outputs = {
            PATHS['DETECTION_REPORT']: self.detection_table(),
            PATHS['MAP_REPORT']: self.map_table(),
            PATHS['BANDWIDTH_REPORT']: self.bandwidth_table(),
            PATHS['PLOT_DATA']: self.plot_data(),
        }
        written = []
        for name, table in outputs.items():
            path = directory / name
            table.to_csv(path, index=False, float_format=Config.REPORT_FLOAT_FORMAT)
            written.append(path)
        logger.info(f"Wrote {len(written)} report tables to {directory}")
        return written

    def format_table(self) -> str:
        """Human-readable summary: mAP per difficulty plus bandwidth."""
        summary = self.map_table().pivot(index='policy', columns='difficulty', values='map')
        summary = summary.reindex(index=[e.policy for e in self.evaluations], columns=self.buckets)
        bandwidth = self.bandwidth_table().set_index('policy')[['kb_display', 'aib']]
        return summary.join(bandwidth).to_string(float_format=lambda v: f"{v:.2f}")
