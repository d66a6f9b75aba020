"""FastAPI application exposing extraction, detection, and pipeline runs."""
from __future__ import annotations

import base64
import binascii

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..detect import DetectorConfig, detect_candidates
from ..extract import (
    ExtractionError,
    MockBackend,
    RuleBasedBackend,
    extract_phenotype,
)
from ..guide import PipelineMode, run_pipeline
from ..harness import (
    ExperimentConfig,
    default_mock_fixture_path,
    report_json_dict,
    run_experiment,
)
from ..phantom import CaseSpec, NoduleSpec, PhantomError, generate_case
from ..voxelcore import VolumeFormatError, decode_volume
from .schemas import (
    CandidateModel,
    CaseSpecModel,
    DetectRequest,
    DetectResponse,
    ExperimentRunRequest,
    ExperimentRunResponse,
    ExtractRequest,
    ExtractResponse,
    HealthResponse,
    ModeOutcomeModel,
    PhenotypeModel,
    PipelineRunRequest,
    PipelineRunResponse,
)


def _backend(name: str):
    if name == "rule":
        return RuleBasedBackend()
    return MockBackend.from_file(default_mock_fixture_path())


def _detector(model) -> DetectorConfig:
    if model is None:
        return DetectorConfig()
    return DetectorConfig.from_json_dict(model.model_dump())


def _phenotype_model(phenotype) -> PhenotypeModel:
    d = phenotype.to_json_dict()
    return PhenotypeModel(lobes=d["lobes"], lymph_stations=d["lymph_stations"])


def _candidate_models(cands) -> list[CandidateModel]:
    return [CandidateModel(**c.to_json_dict()) for c in cands]


def _case_spec(model: CaseSpecModel) -> CaseSpec:
    nodules = tuple(
        NoduleSpec.from_json_dict(n.model_dump()) for n in model.nodules
    )
    return CaseSpec(
        case_id=model.case_id,
        nodules=nodules,
        noise_sigma_hu=model.noise_sigma_hu,
        lymph_stations=tuple(model.lymph_stations),
        lobe_jitter=model.lobe_jitter,
    )


def create_app() -> FastAPI:
    app = FastAPI(title="lobeguide", version=__version__)

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", version=__version__)

    @app.post("/extract", response_model=ExtractResponse)
    def extract(req: ExtractRequest) -> ExtractResponse:
        try:
            phenotype = extract_phenotype(req.report, _backend(req.backend))
        except ExtractionError as err:
            raise HTTPException(status_code=422, detail=str(err)) from err
        return ExtractResponse(phenotype=_phenotype_model(phenotype))

    @app.post("/detect", response_model=DetectResponse)
    def detect(req: DetectRequest) -> DetectResponse:
        try:
            blob = base64.b64decode(req.volume_b64, validate=True)
        except (binascii.Error, ValueError) as err:
            raise HTTPException(status_code=422, detail=f"bad base64: {err}") from err
        try:
            vol = decode_volume(blob)
            cands = detect_candidates(vol, _detector(req.config))
        except (VolumeFormatError, ValueError) as err:
            raise HTTPException(status_code=422, detail=str(err)) from err
        return DetectResponse(candidates=_candidate_models(cands))

    @app.post("/pipeline/run", response_model=PipelineRunResponse)
    def pipeline_run(req: PipelineRunRequest) -> PipelineRunResponse:
        try:
            case = generate_case(_case_spec(req.spec), req.seed)
            result = run_pipeline(
                case,
                PipelineMode(req.mode),
                _detector(req.config),
                _backend(req.backend) if req.mode == "guided" else None,
            )
        except (PhantomError, ExtractionError, ValueError) as err:
            raise HTTPException(status_code=422, detail=str(err)) from err
        outcome = ModeOutcomeModel(
            detected=result.detected,
            removed=result.removed,
            kept=_candidate_models(result.kept),
            verdict=result.outcome.verdict.value,
            tp=result.outcome.tp,
            fp=result.outcome.fp,
            fn=result.outcome.fn,
            phenotype=(
                None if result.phenotype is None else _phenotype_model(result.phenotype)
            ),
        )
        return PipelineRunResponse(
            case_id=case.case_id,
            mode=req.mode,
            result=outcome,
            report=case.report,
        )

    @app.post("/experiment/run", response_model=ExperimentRunResponse)
    def experiment_run(req: ExperimentRunRequest) -> ExperimentRunResponse:
        try:
            cfg = ExperimentConfig(
                cohort=req.cohort,
                seed=req.seed,
                backend=req.backend,
                detector=_detector(req.detector),
                parallelism=req.parallelism,
                random_cases=req.random_cases,
            )
            report = run_experiment(cfg)
        except (ValueError, FileNotFoundError) as err:
            raise HTTPException(status_code=422, detail=str(err)) from err
        return ExperimentRunResponse(**report_json_dict(report))

    return app
