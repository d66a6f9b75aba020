"""Overlap metrics, detection matching, precision/AP, and case verdicts."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .voxelcore import BBox3, Mask


@dataclass(frozen=True)
class Detection:
    """A scored detection box."""

    box: BBox3
    score: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


@dataclass(frozen=True)
class MatchPair:
    det_index: int
    gt_index: int
    iou: float


@dataclass(frozen=True)
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: tuple[MatchPair, ...]


class CaseVerdict(Enum):
    MATCH = "Match"
    NO_FN = "NoFN"
    NO_FP = "NoFP"


@dataclass(frozen=True)
class CaseOutcome:
    verdict: CaseVerdict
    tp: int
    fp: int
    fn: int


def dsc(a: Mask, b: Mask) -> float:
    """Dice coefficient 2|a∩b| / (|a| + |b|); 1.0 when both masks are empty."""
    if not a.same_geometry(b):
        raise ValueError("mask geometries differ")
    inter = int(np.logical_and(a.voxels, b.voxels).sum())
    total = a.count + b.count
    if total == 0:
        return 1.0
    return 2.0 * inter / total


def intersection_over_size_sum(a: Mask, b: Mask) -> float:
    """Diagnostic quotient |a∩b| / (|a| + |b|), i.e. half the Dice coefficient."""
    return dsc(a, b) / 2.0


def iou3d(a: BBox3, b: BBox3) -> float:
    """Intersection over union of two boxes, by exact voxel counts."""
    inter = 1
    for (al, ah), (bl, bh) in zip(zip(a.low, a.high), zip(b.low, b.high)):
        side = min(ah, bh) - max(al, bl)
        if side <= 0:
            return 0.0
        inter *= side
    union = a.volume_voxels + b.volume_voxels - inter
    return inter / union


def _ranked_indices(dets: Sequence[Detection]) -> list[int]:
    # Descending score; ties keep input order.
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))


def match_detections(
    dets: Sequence[Detection], gts: Sequence[BBox3], iou_thr: float
) -> MatchResult:
    """Greedy one-to-one matching in descending score order.

    Each detection takes the unmatched ground-truth box with the highest IoU
    when that IoU reaches the threshold; equal IoUs resolve to the lower
    ground-truth index.
    """
    if not 0.0 < iou_thr <= 1.0:
        raise ValueError(f"iou_thr must lie in (0, 1], got {iou_thr}")
    matched: set[int] = set()
    pairs: list[MatchPair] = []
    for di in _ranked_indices(dets):
        best_iou = 0.0
        best_gt = -1
        for gi, gt in enumerate(gts):
            if gi in matched:
                continue
            iou = iou3d(dets[di].box, gt)
            if iou > best_iou:
                best_iou = iou
                best_gt = gi
        if best_gt >= 0 and best_iou >= iou_thr:
            matched.add(best_gt)
            pairs.append(MatchPair(di, best_gt, best_iou))
    tp = len(pairs)
    return MatchResult(
        tp=tp,
        fp=len(dets) - tp,
        fn=len(gts) - tp,
        pairs=tuple(sorted(pairs, key=lambda p: p.det_index)),
    )


def precision_eq6(matches: Sequence[MatchResult]) -> float:
    """Mean over classes of TP / (TP + FP); a class with TP+FP = 0 contributes 0."""
    if len(matches) == 0:
        raise ValueError("precision over zero classes is undefined")
    total = 0.0
    for m in matches:
        denom = m.tp + m.fp
        total += m.tp / denom if denom > 0 else 0.0
    return total / len(matches)


def average_precision(
    dets: Sequence[Detection], gts: Sequence[BBox3], iou_thr: float
) -> float:
    """All-point interpolated AP over the score-ranked precision/recall curve."""
    if len(gts) == 0:
        raise ValueError("average precision is undefined without ground truth")
    if not 0.0 < iou_thr <= 1.0:
        raise ValueError(f"iou_thr must lie in (0, 1], got {iou_thr}")
    flags = ranked_tp_flags(dets, gts, iou_thr)
    return ap_from_ranked_flags(flags, len(gts))


def ranked_tp_flags(
    dets: Sequence[Detection], gts: Sequence[BBox3], iou_thr: float
) -> list[bool]:
    """TP/FP flags for detections in rank order, matched greedily as in
    match_detections."""
    matched: set[int] = set()
    flags: list[bool] = []
    for di in _ranked_indices(dets):
        best_iou = 0.0
        best_gt = -1
        for gi, gt in enumerate(gts):
            if gi in matched:
                continue
            iou = iou3d(dets[di].box, gt)
            if iou > best_iou:
                best_iou = iou
                best_gt = gi
        if best_gt >= 0 and best_iou >= iou_thr:
            matched.add(best_gt)
            flags.append(True)
        else:
            flags.append(False)
    return flags


def ap_from_ranked_flags(flags: Sequence[bool], n_gt: int) -> float:
    """AP given rank-ordered TP flags and the ground-truth count."""
    if n_gt < 1:
        raise ValueError("n_gt must be >= 1")
    recalls = []
    precisions = []
    tp = 0
    for k, flag in enumerate(flags, start=1):
        if flag:
            tp += 1
        recalls.append(tp / n_gt)
        precisions.append(tp / k)
    ap = 0.0
    prev_recall = 0.0
    for k in range(len(flags)):
        r = recalls[k]
        if r > prev_recall:
            envelope = max(precisions[k:])
            ap += (r - prev_recall) * envelope
            prev_recall = r
    return ap


def case_outcome(
    kept: Sequence[Detection], gts: Sequence[BBox3], iou_thr: float
) -> CaseOutcome:
    """Per-case verdict: Match iff no FN and no FP; NoFN iff any FN; else NoFP."""
    m = match_detections(kept, gts, iou_thr)
    if m.fn > 0:
        verdict = CaseVerdict.NO_FN
    elif m.fp > 0:
        verdict = CaseVerdict.NO_FP
    else:
        verdict = CaseVerdict.MATCH
    return CaseOutcome(verdict=verdict, tp=m.tp, fp=m.fp, fn=m.fn)


def boost_percent(unguided_matches: int, guided_matches: int, n_cases: int) -> float:
    """Relative improvement 100 * (guided - unguided) / unguided."""
    if n_cases < 1:
        raise ValueError("n_cases must be >= 1")
    for name, v in (("unguided", unguided_matches), ("guided", guided_matches)):
        if not 0 <= v <= n_cases:
            raise ValueError(f"{name} match count {v} outside [0, {n_cases}]")
    if unguided_matches == 0:
        raise ValueError("boost is undefined when the unguided match count is 0")
    return 100.0 * (guided_matches - unguided_matches) / unguided_matches
