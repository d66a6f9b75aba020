"""Report-guided candidate filtering and the per-case pipeline.

Candidates get a lobe by majority overlap of their box with the lobe label
map; guided mode then keeps only candidates whose lobe is in the extracted
phenotype. A masked re-detection path (blank out non-phenotype lobes, detect
again) is exposed as an alternative and agrees with filtering on the fixtures.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .detect import Candidate, DetectorConfig, detect_candidates, segment_candidate
from .extract import PhenotypeBackend, TumorPhenotype, extract_phenotype
from .lobes import LobeId
from .metrics import CaseOutcome, Detection, case_outcome
from .phantom import CohortCase
from .voxelcore import LobeLabelMap, Mask, apply_lobe_mask

EVAL_IOU = 0.5


class PipelineMode(Enum):
    UNGUIDED = "unguided"
    GUIDED = "guided"


@dataclass(frozen=True)
class LobeAssignment:
    """The lobe a candidate's box overlaps most, with the overlap fraction."""

    candidate_index: int
    lobe: LobeId | None
    overlap_fraction: float


@dataclass
class FilterResult:
    kept: list[Candidate]
    removed_by_phenotype: list[Candidate]
    discarded_no_lobe: list[Candidate]


@dataclass
class CaseResult:
    """Counts, kept candidates, segmentations, and verdict for one case/mode."""

    case_id: int | str
    mode: PipelineMode
    detected: int
    removed: int
    kept: list[Candidate]
    masks: list[Mask]
    outcome: CaseOutcome
    assignments: list[LobeAssignment]
    phenotype: TumorPhenotype | None


def assign_lobe(
    cand: Candidate, lobes: LobeLabelMap, candidate_index: int = 0
) -> LobeAssignment:
    """Argmax lobe by fraction of box voxels carrying each label.

    Ties resolve to the smaller lobe id; a box overlapping no lobe voxel gets
    lobe None. The box must lie inside the label map extent.
    """
    for lo, hi, d in zip(cand.box.low, cand.box.high, lobes.dims):
        if lo < 0 or hi > d:
            raise ValueError(f"candidate box {cand.box} outside volume dims {lobes.dims}")
    region = lobes.voxels[cand.box.slices()]
    counts = np.bincount(region.ravel(), minlength=int(max(LobeId)) + 1)
    lobe_counts = counts[1:]
    if lobe_counts.sum() == 0:
        return LobeAssignment(candidate_index, None, 0.0)
    best = int(np.argmax(lobe_counts))
    fraction = float(lobe_counts[best]) / cand.box.volume_voxels
    return LobeAssignment(candidate_index, LobeId(best + 1), fraction)


def assign_lobes(cands: Sequence[Candidate], lobes: LobeLabelMap) -> list[LobeAssignment]:
    return [assign_lobe(c, lobes, i) for i, c in enumerate(cands)]


def filter_candidates(
    cands: Sequence[Candidate],
    assignments: Sequence[LobeAssignment],
    phenotype: TumorPhenotype | None,
) -> FilterResult:
    """Partition candidates into kept / removed-by-phenotype / no-lobe.

    With a phenotype (guided), kept means assigned to a phenotype lobe; without
    one (unguided), every lobe-assigned candidate is kept. An empty phenotype
    lobe set is rejected.
    """
    if len(cands) != len(assignments):
        raise ValueError("candidates and assignments are misaligned")
    if phenotype is not None and not phenotype.lobes:
        raise ValueError("guided filtering requires a non-empty lobe set")
    result = FilterResult(kept=[], removed_by_phenotype=[], discarded_no_lobe=[])
    for cand, assignment in zip(cands, assignments):
        if assignment.lobe is None:
            result.discarded_no_lobe.append(cand)
        elif phenotype is not None and assignment.lobe not in phenotype.lobes:
            result.removed_by_phenotype.append(cand)
        else:
            result.kept.append(cand)
    return result


def run_pipeline(
    case: CohortCase,
    mode: PipelineMode,
    cfg: DetectorConfig = DetectorConfig(),
    backend: PhenotypeBackend | None = None,
) -> CaseResult:
    """Detect, assign lobes, filter (guided uses the extracted phenotype),
    segment the kept candidates, and score the case at IoU 0.5."""
    mode = PipelineMode(mode)
    cands = detect_candidates(case.volume, cfg)
    assignments = assign_lobes(cands, case.lobes)
    phenotype: TumorPhenotype | None = None
    if mode is PipelineMode.GUIDED:
        if backend is None:
            raise ValueError("guided mode requires an extraction backend")
        phenotype = extract_phenotype(case.report, backend)
    filtered = filter_candidates(cands, assignments, phenotype)
    masks = [segment_candidate(case.volume, c, cfg) for c in filtered.kept]
    outcome = case_outcome(
        [Detection(c.box, c.score) for c in filtered.kept],
        [box for box, _ in case.gt_boxes],
        EVAL_IOU,
    )
    removed = (
        len(filtered.removed_by_phenotype)
        if mode is PipelineMode.GUIDED
        else len(filtered.discarded_no_lobe)
    )
    return CaseResult(
        case_id=case.case_id,
        mode=mode,
        detected=len(cands),
        removed=removed,
        kept=filtered.kept,
        masks=masks,
        outcome=outcome,
        assignments=assignments,
        phenotype=phenotype,
    )


def run_pipeline_masked(
    case: CohortCase,
    cfg: DetectorConfig = DetectorConfig(),
    backend: PhenotypeBackend | None = None,
) -> CaseResult:
    """Guided alternative: blank out non-phenotype lobes, then re-detect.

    Kept sets agree with the filtering path on the bundled fixtures.
    """
    if backend is None:
        raise ValueError("masked guidance requires an extraction backend")
    phenotype = extract_phenotype(case.report, backend)
    masked = apply_lobe_mask(case.volume, case.lobes, phenotype.lobes)
    cands = detect_candidates(masked, cfg)
    assignments = assign_lobes(cands, case.lobes)
    filtered = filter_candidates(cands, assignments, phenotype)
    masks = [segment_candidate(masked, c, cfg) for c in filtered.kept]
    outcome = case_outcome(
        [Detection(c.box, c.score) for c in filtered.kept],
        [box for box, _ in case.gt_boxes],
        EVAL_IOU,
    )
    return CaseResult(
        case_id=case.case_id,
        mode=PipelineMode.GUIDED,
        detected=len(cands),
        removed=len(filtered.removed_by_phenotype),
        kept=filtered.kept,
        masks=masks,
        outcome=outcome,
        assignments=assignments,
        phenotype=phenotype,
    )
