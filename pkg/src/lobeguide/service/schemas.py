"""Request/response models for the HTTP service."""
from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field


class DetectorConfigModel(BaseModel):
    hu_threshold: float = -300.0
    min_volume_mm3: float = Field(default=14.0, gt=0.0)
    max_volume_mm3: float = Field(default=1.4e5, gt=0.0)
    classifier_threshold: float = Field(default=0.5, ge=0.0, le=1.0)
    nms_iou: float = Field(default=0.1, ge=0.0, lt=1.0)
    detect_patch: tuple[int, int, int] = (96, 96, 96)
    segment_patch: tuple[int, int, int] = (64, 64, 64)


class CandidateModel(BaseModel):
    box_min: tuple[int, int, int]
    box_max: tuple[int, int, int]
    score: float
    centroid: tuple[float, float, float]


class PhenotypeModel(BaseModel):
    lobes: list[str]
    lymph_stations: list[str]


class HealthResponse(BaseModel):
    status: Literal["ok"]
    version: str


class ExtractRequest(BaseModel):
    report: str = Field(min_length=1)
    backend: Literal["rule", "mock"] = "rule"


class ExtractResponse(BaseModel):
    phenotype: PhenotypeModel


class DetectRequest(BaseModel):
    volume_b64: str = Field(description="base64 of an EXNV intensity volume")
    config: Optional[DetectorConfigModel] = None


class DetectResponse(BaseModel):
    candidates: list[CandidateModel]


class NoduleSpecModel(BaseModel):
    lobe: str
    center_frac: tuple[float, float, float]
    radius_mm: float = Field(gt=0.0)
    contrast_hu: float = Field(gt=0.0)
    kind: Literal["true_tumor", "distractor", "suppressed_tumor"] = "true_tumor"


class CaseSpecModel(BaseModel):
    case_id: int | str
    nodules: list[NoduleSpecModel] = Field(min_length=1)
    noise_sigma_hu: float = Field(default=15.0, ge=0.0)
    lymph_stations: list[str] = Field(default_factory=list)
    lobe_jitter: bool = False


class PipelineRunRequest(BaseModel):
    spec: CaseSpecModel
    seed: int = 42
    mode: Literal["unguided", "guided"] = "guided"
    backend: Literal["rule", "mock"] = "rule"
    config: Optional[DetectorConfigModel] = None


class ModeOutcomeModel(BaseModel):
    detected: int
    removed: int
    kept: list[CandidateModel]
    verdict: Literal["Match", "NoFN", "NoFP"]
    tp: int
    fp: int
    fn: int
    phenotype: Optional[PhenotypeModel] = None


class PipelineRunResponse(BaseModel):
    case_id: int | str
    mode: Literal["unguided", "guided"]
    result: ModeOutcomeModel
    report: str


class ExperimentRunRequest(BaseModel):
    cohort: str = "table3"
    seed: int = 42
    backend: Literal["rule", "mock"] = "rule"
    detector: Optional[DetectorConfigModel] = None
    parallelism: int = Field(default=1, ge=1)
    random_cases: int = Field(default=10, ge=1)


class CaseRowModel(BaseModel):
    case_id: int | str
    ground_truth: int
    unguided: Optional[dict] = None
    guided: Optional[dict] = None
    kept_tumor_dsc: list[float]
    error: Optional[str] = None


class ExperimentRunResponse(BaseModel):
    seed: int
    backend: str
    n_cases: int
    unguided_matches: int
    guided_matches: int
    boost_pct: Optional[float] = None
    boost_points: float
    mean_kept_tumor_dsc: Optional[float] = None
    ap50: float
    ap70: float
    cases: list[CaseRowModel]
