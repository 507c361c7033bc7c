"""Detection-quality metrics: IoU, all-points average precision, mAP,
and pseudo-label quality accounting.

AP uses greedy per-scene matching (each ground-truth box matched at most
once, highest-scoring detection first) and all-points interpolation, i.e.
the exact area under the precision envelope over recall. That choice makes
the value reproducible by brute-force enumeration on small fixtures.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .fusion import BoundingBox

__all__ = [
    "DetectionRecord",
    "GroundTruthRecord",
    "PseudoLabelQuality",
    "iou",
    "average_precision",
    "mean_ap",
    "pseudo_label_quality",
]


@dataclass(frozen=True)
class DetectionRecord:
    scene_id: int
    class_index: int
    score: float
    box: BoundingBox

    def __post_init__(self) -> None:
        if not (0 < self.score <= 1):
            raise ValueError(f"score must be in (0, 1], got {self.score}")


@dataclass(frozen=True)
class GroundTruthRecord:
    scene_id: int
    class_index: int
    box: BoundingBox


@dataclass
class PseudoLabelQuality:
    num_pseudo: int
    num_gt: int
    num_matched: int
    class_accuracy: float  # among matched, NaN if none matched
    mean_iou: float  # among matched, NaN if none matched
    fp_count: int
    fn_count: int

    @property
    def fp_rate(self) -> float:
        return self.fp_count / self.num_pseudo if self.num_pseudo else 0.0

    @property
    def fn_rate(self) -> float:
        return self.fn_count / self.num_gt if self.num_gt else 0.0


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union, in [0, 1]."""
    ix = max(0.0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0.0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def _sorted_detections(detections: Sequence[DetectionRecord],
                       class_index: int) -> list[tuple[int, DetectionRecord]]:
    indexed = [(i, d) for i, d in enumerate(detections) if d.class_index == class_index]
    indexed.sort(key=lambda pair: (-pair[1].score, pair[1].scene_id, pair[0]))
    return indexed


def _match_flags(detections: Sequence[DetectionRecord],
                 ground_truth: Sequence[GroundTruthRecord],
                 class_index: int,
                 iou_threshold: float) -> tuple[list[bool], int]:
    """True-positive flags in score order, plus the ground-truth count."""
    gts = [g for g in ground_truth if g.class_index == class_index]
    unmatched: dict[int, list[GroundTruthRecord]] = {}
    for g in gts:
        unmatched.setdefault(g.scene_id, []).append(g)

    flags: list[bool] = []
    for _, det in _sorted_detections(detections, class_index):
        cands = unmatched.get(det.scene_id, [])
        best, best_iou = None, iou_threshold
        for g in cands:
            v = iou(det.box, g.box)
            if v >= best_iou:
                best, best_iou = g, v
        if best is not None:
            cands.remove(best)
            flags.append(True)
        else:
            flags.append(False)
    return flags, len(gts)


def _ap_from_flags(flags: Sequence[bool], num_gt: int) -> float:
    """All-points AP: exact area under the precision envelope over recall."""
    if num_gt == 0:
        return 0.0
    tp = np.cumsum(np.asarray(flags, dtype=np.float64))
    fp = np.cumsum(~np.asarray(flags, dtype=bool))
    recall = tp / num_gt
    precision = tp / (tp + fp)
    # Precision envelope: running max from the right.
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev_recall = 0.0
    ap = 0.0
    for r, p in zip(recall, env):
        ap += (r - prev_recall) * p
        prev_recall = r
    return float(ap)


def average_precision(detections: Sequence[DetectionRecord],
                      ground_truth: Sequence[GroundTruthRecord],
                      class_index: int,
                      iou_threshold: float = 0.5) -> float:
    """All-points AP for one class; 0 (with a warning) if the class has no GT."""
    if not (0 < iou_threshold < 1):
        raise ValueError(f"iou_threshold must be in (0, 1), got {iou_threshold}")
    flags, num_gt = _match_flags(detections, ground_truth, class_index, iou_threshold)
    if num_gt == 0:
        warnings.warn(f"no ground truth for class {class_index}; AP defined as 0",
                      stacklevel=2)
        return 0.0
    return _ap_from_flags(flags, num_gt)


def mean_ap(detections: Sequence[DetectionRecord],
            ground_truth: Sequence[GroundTruthRecord],
            iou_threshold: float = 0.5) -> float:
    """Unweighted mean AP over classes with at least one ground-truth box."""
    classes = sorted({g.class_index for g in ground_truth})
    if not classes:
        return 0.0
    return float(np.mean([
        average_precision(detections, ground_truth, c, iou_threshold)
        for c in classes
    ]))


def pseudo_label_quality(
    pseudo_labels: Sequence[DetectionRecord],
    ground_truth: Sequence[GroundTruthRecord],
    iou_threshold: float = 0.5,
) -> PseudoLabelQuality:
    """Match pseudo-labels to ground truth class-agnostically at the IoU
    threshold; report class accuracy and IoU among matched, FP/FN counts."""
    unmatched: dict[int, list[GroundTruthRecord]] = {}
    for g in ground_truth:
        unmatched.setdefault(g.scene_id, []).append(g)

    ordered = sorted(enumerate(pseudo_labels),
                     key=lambda pair: (-pair[1].score, pair[1].scene_id, pair[0]))
    matched_ious: list[float] = []
    matched_correct: list[bool] = []
    fp = 0
    for _, pl in ordered:
        cands = unmatched.get(pl.scene_id, [])
        best, best_iou = None, iou_threshold
        for g in cands:
            v = iou(pl.box, g.box)
            if v >= best_iou:
                best, best_iou = g, v
        if best is None:
            fp += 1
        else:
            cands.remove(best)
            matched_ious.append(best_iou)
            matched_correct.append(pl.class_index == best.class_index)
    fn = sum(len(v) for v in unmatched.values())
    n_matched = len(matched_ious)
    return PseudoLabelQuality(
        num_pseudo=len(pseudo_labels),
        num_gt=len(ground_truth),
        num_matched=n_matched,
        class_accuracy=float(np.mean(matched_correct)) if n_matched else float("nan"),
        mean_iou=float(np.mean(matched_ious)) if n_matched else float("nan"),
        fp_count=fp,
        fn_count=fn,
    )
