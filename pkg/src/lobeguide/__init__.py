"""Lobe-guided false-positive reduction for lung-nodule detection on
synthetic CT phantoms with paired radiology reports."""

from .lobes import LobeId, find_lobe_mentions
from .voxelcore import (
    AugSpec,
    BBox3,
    LobeLabelMap,
    MalformedHeaderError,
    Mask,
    PatchWindow,
    TruncatedPayloadError,
    UnknownDtypeError,
    Volume,
    VolumeFormatError,
    apply_augmentation,
    apply_lobe_mask,
    clip_intensity,
    crop_patch,
    decode_volume,
    encode_volume,
    mask_to_bboxes,
    read_volume,
    resample_to_isotropic,
    sliding_patches,
    write_volume,
)
from .losses import (
    BoxRegressionPair,
    FocalParams,
    ProbTargetPair,
    cross_entropy,
    dice_loss,
    dual_loss,
    focal_loss,
    numeric_gradient,
    smooth_l1,
)
from .metrics import (
    CaseOutcome,
    CaseVerdict,
    Detection,
    MatchResult,
    average_precision,
    boost_percent,
    case_outcome,
    dsc,
    intersection_over_size_sum,
    iou3d,
    match_detections,
    precision_eq6,
)
from .extract import (
    ChatBackend,
    ChatRequest,
    EmptyPhenotypeError,
    ExtractionError,
    InvalidOptionError,
    MockBackend,
    RuleBasedBackend,
    TransportError,
    TumorPhenotype,
    UnparseableResponseError,
    build_chat_request,
    extract_phenotype,
    parse_phenotype_response,
    rule_extract,
)
from .phantom import (
    CaseSpec,
    CohortCase,
    LobeGeometry,
    NoduleKind,
    NoduleSpec,
    generate_case,
    generate_cohort,
    generate_report,
    load_case,
    random_cohort_specs,
    save_case,
    table3_specs,
)
from .detect import Candidate, DetectorConfig, detect_candidates, nms, segment_candidate
from .guide import (
    CaseResult,
    FilterResult,
    LobeAssignment,
    PipelineMode,
    assign_lobe,
    assign_lobes,
    filter_candidates,
    run_pipeline,
    run_pipeline_masked,
)
from .harness import (
    ExperimentConfig,
    ExperimentReport,
    emit_reports,
    pooled_average_precision,
    run_experiment,
)

__version__ = "0.1.0"

__all__ = [
    "AugSpec",
    "BBox3",
    "BoxRegressionPair",
    "Candidate",
    "CaseOutcome",
    "CaseResult",
    "CaseSpec",
    "CaseVerdict",
    "ChatBackend",
    "ChatRequest",
    "CohortCase",
    "Detection",
    "DetectorConfig",
    "EmptyPhenotypeError",
    "ExperimentConfig",
    "ExperimentReport",
    "ExtractionError",
    "FilterResult",
    "FocalParams",
    "InvalidOptionError",
    "LobeAssignment",
    "LobeGeometry",
    "LobeId",
    "LobeLabelMap",
    "MalformedHeaderError",
    "Mask",
    "MatchResult",
    "MockBackend",
    "NoduleKind",
    "NoduleSpec",
    "PatchWindow",
    "PipelineMode",
    "ProbTargetPair",
    "RuleBasedBackend",
    "TransportError",
    "TruncatedPayloadError",
    "TumorPhenotype",
    "UnknownDtypeError",
    "UnparseableResponseError",
    "Volume",
    "VolumeFormatError",
    "apply_augmentation",
    "apply_lobe_mask",
    "assign_lobe",
    "assign_lobes",
    "average_precision",
    "boost_percent",
    "build_chat_request",
    "case_outcome",
    "clip_intensity",
    "crop_patch",
    "cross_entropy",
    "decode_volume",
    "detect_candidates",
    "dice_loss",
    "encode_volume",
    "dsc",
    "dual_loss",
    "emit_reports",
    "extract_phenotype",
    "filter_candidates",
    "find_lobe_mentions",
    "focal_loss",
    "generate_case",
    "generate_cohort",
    "generate_report",
    "intersection_over_size_sum",
    "iou3d",
    "load_case",
    "mask_to_bboxes",
    "match_detections",
    "nms",
    "numeric_gradient",
    "parse_phenotype_response",
    "pooled_average_precision",
    "precision_eq6",
    "random_cohort_specs",
    "read_volume",
    "resample_to_isotropic",
    "rule_extract",
    "run_experiment",
    "run_pipeline",
    "run_pipeline_masked",
    "save_case",
    "segment_candidate",
    "sliding_patches",
    "smooth_l1",
    "table3_specs",
    "write_volume",
]
