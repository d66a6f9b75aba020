"""Experiment harness: run a cohort in both modes, pool detection metrics,
and emit table3.csv, report.json, and summary.txt deterministically."""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import jsonschema

from .detect import DetectorConfig
from .extract import (
    ChatBackend,
    MockBackend,
    PhenotypeBackend,
    PromptTemplate,
    RuleBasedBackend,
)
from .guide import CaseResult, PipelineMode, run_pipeline
from .metrics import (
    CaseVerdict,
    Detection,
    ap_from_ranked_flags,
    boost_percent,
    dsc,
    iou3d,
    match_detections,
)
from .phantom import CaseSpec, CohortCase, generate_case, random_cohort_specs, table3_specs
from .voxelcore import BBox3

VERDICT_LABELS = {
    CaseVerdict.MATCH: "Yes",
    CaseVerdict.NO_FN: "No",
    CaseVerdict.NO_FP: "No (FP)",
}

CSV_COLUMNS = (
    "case_id",
    "ground_truth",
    "detected_nodules",
    "removed_nodules",
    "matching_ground_truth",
)

REPORT_SCHEMA = {
    "type": "object",
    "required": [
        "seed",
        "backend",
        "n_cases",
        "unguided_matches",
        "guided_matches",
        "boost_pct",
        "boost_points",
        "mean_kept_tumor_dsc",
        "ap50",
        "ap70",
        "cases",
    ],
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer"},
        "backend": {"type": "string"},
        "n_cases": {"type": "integer", "minimum": 0},
        "unguided_matches": {"type": "integer", "minimum": 0},
        "guided_matches": {"type": "integer", "minimum": 0},
        "boost_pct": {"type": ["number", "null"]},
        "boost_points": {"type": "number"},
        "mean_kept_tumor_dsc": {"type": ["number", "null"]},
        "ap50": {"type": "number"},
        "ap70": {"type": "number"},
        "cases": {
            "type": "array",
            "items": {
                "type": "object",
                "required": [
                    "case_id",
                    "ground_truth",
                    "unguided",
                    "guided",
                    "kept_tumor_dsc",
                    "error",
                ],
                "additionalProperties": False,
                "properties": {
                    "case_id": {"type": ["integer", "string"]},
                    "ground_truth": {"type": "integer", "minimum": 0},
                    "unguided": {"$ref": "#/$defs/mode"},
                    "guided": {"$ref": "#/$defs/mode"},
                    "kept_tumor_dsc": {"type": "array", "items": {"type": "number"}},
                    "error": {"type": ["string", "null"]},
                },
            },
        },
    },
    "$defs": {
        "mode": {
            "type": ["object", "null"],
            "required": ["detected", "removed", "kept", "verdict"],
            "additionalProperties": False,
            "properties": {
                "detected": {"type": "integer", "minimum": 0},
                "removed": {"type": "integer", "minimum": 0},
                "kept": {"type": "integer", "minimum": 0},
                "verdict": {"enum": ["Match", "NoFN", "NoFP"]},
            },
        }
    },
}


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: a cohort source, a detector, a backend, and a seed.

    ``cohort`` is "table3", "random", or a path to a JSON file with a
    top-level ``{"cases": [...]}`` list of case specs.
    """

    cohort: str = "table3"
    seed: int = 42
    backend: str = "rule"
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    parallelism: int = 1
    mock_fixtures: str | None = None
    chat_endpoint: str | None = None
    chat_model: str = "gpt-3.5-turbo"
    random_cases: int = 10

    def __post_init__(self) -> None:
        if self.backend not in ("rule", "mock", "chat"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        if self.backend == "chat" and not self.chat_endpoint:
            raise ValueError("chat backend requires chat_endpoint")
        if self.random_cases < 1:
            raise ValueError("random_cases must be >= 1")

    @classmethod
    def from_json_dict(cls, d: dict) -> "ExperimentConfig":
        kwargs = dict(d)
        if "detector" in kwargs:
            kwargs["detector"] = DetectorConfig.from_json_dict(kwargs["detector"])
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_json_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class CaseRow:
    """Both pipeline modes for one case, plus matched-pair DSC values."""

    case_id: int | str
    gt_boxes: list[BBox3]
    unguided: CaseResult | None
    guided: CaseResult | None
    kept_tumor_dsc: list[float]
    error: str | None = None

    @property
    def gt_count(self) -> int:
        return len(self.gt_boxes)


@dataclass
class ExperimentReport:
    seed: int
    backend: str
    rows: list[CaseRow]
    unguided_matches: int
    guided_matches: int
    boost_pct: float | None
    boost_points: float
    mean_kept_tumor_dsc: float | None
    ap50: float
    ap70: float

    @property
    def n_cases(self) -> int:
        return len(self.rows)


def default_mock_fixture_path() -> Path:
    return Path(str(resources.files("lobeguide.data").joinpath("mock_fixtures.json")))


def make_backend(cfg: ExperimentConfig) -> PhenotypeBackend:
    if cfg.backend == "rule":
        return RuleBasedBackend()
    if cfg.backend == "mock":
        path = Path(cfg.mock_fixtures) if cfg.mock_fixtures else default_mock_fixture_path()
        return MockBackend.from_file(path)
    template = PromptTemplate(model_id=cfg.chat_model)
    return ChatBackend(endpoint=cfg.chat_endpoint, template=template)


def load_cohort_specs(cfg: ExperimentConfig) -> list[CaseSpec]:
    if cfg.cohort == "table3":
        return table3_specs()
    if cfg.cohort == "random":
        return random_cohort_specs(cfg.random_cases, cfg.seed)
    data = json.loads(Path(cfg.cohort).read_text(encoding="utf-8"))
    return [CaseSpec.from_json_dict(d) for d in data["cases"]]


def matched_pair_dsc(case: CohortCase, result: CaseResult) -> list[float]:
    """DSC of each kept candidate's segmentation against its matched gt mask."""
    dets = [Detection(c.box, c.score) for c in result.kept]
    gts = [box for box, _ in case.gt_boxes]
    match = match_detections(dets, gts, 0.5)
    return [
        dsc(result.masks[pair.det_index], case.gt_masks[pair.gt_index])
        for pair in match.pairs
    ]


def _run_one(
    spec: CaseSpec, case_seed: int, detector: DetectorConfig, backend: PhenotypeBackend
) -> CaseRow:
    case = generate_case(spec, case_seed)
    gt_boxes = [box for box, _ in case.gt_boxes]
    try:
        unguided = run_pipeline(case, PipelineMode.UNGUIDED, detector)
        guided = run_pipeline(case, PipelineMode.GUIDED, detector, backend)
    except Exception as err:  # recorded as an error row, the run continues
        return CaseRow(
            case_id=spec.case_id,
            gt_boxes=gt_boxes,
            unguided=None,
            guided=None,
            kept_tumor_dsc=[],
            error=f"{type(err).__name__}: {err}",
        )
    return CaseRow(
        case_id=spec.case_id,
        gt_boxes=gt_boxes,
        unguided=unguided,
        guided=guided,
        kept_tumor_dsc=matched_pair_dsc(case, guided),
    )


def pooled_average_precision(rows: Sequence[CaseRow], iou_thr: float) -> float:
    """All-point-interpolated AP pooled across cases.

    Unguided kept candidates are ranked globally by descending score (ties by
    case order, then per-case candidate order) and matched greedily against
    their own case's ground-truth boxes.
    """
    if not 0.0 < iou_thr <= 1.0:
        raise ValueError("iou_thr must be in (0, 1]")
    total_gt = sum(len(r.gt_boxes) for r in rows)
    if total_gt == 0:
        raise ValueError("pooled AP needs at least one ground-truth box")
    entries = []
    for ci, row in enumerate(rows):
        if row.unguided is None:
            continue
        for c in row.unguided.kept:
            entries.append((c.score, ci, c.box))
    order = sorted(range(len(entries)), key=lambda i: (-entries[i][0], i))
    matched: dict[int, set[int]] = {ci: set() for ci in range(len(rows))}
    flags: list[bool] = []
    for i in order:
        _, ci, box = entries[i]
        best_iou = 0.0
        best_gt = None
        for gi, gt in enumerate(rows[ci].gt_boxes):
            if gi in matched[ci]:
                continue
            iou = iou3d(box, gt)
            if iou > best_iou:
                best_iou = iou
                best_gt = gi
        if best_gt is not None and best_iou >= iou_thr:
            matched[ci].add(best_gt)
            flags.append(True)
        else:
            flags.append(False)
    return ap_from_ranked_flags(flags, total_gt)


def run_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    """Run every case in both modes; output is order-stable and repeatable."""
    specs = load_cohort_specs(cfg)
    backend = make_backend(cfg)
    seeds = [cfg.seed ^ i for i in range(len(specs))]
    if cfg.parallelism > 1:
        with ThreadPoolExecutor(max_workers=cfg.parallelism) as pool:
            rows = list(
                pool.map(
                    lambda args: _run_one(args[0], args[1], cfg.detector, backend),
                    zip(specs, seeds),
                )
            )
    else:
        rows = [_run_one(s, cs, cfg.detector, backend) for s, cs in zip(specs, seeds)]

    unguided_matches = sum(
        1
        for r in rows
        if r.unguided is not None and r.unguided.outcome.verdict is CaseVerdict.MATCH
    )
    guided_matches = sum(
        1
        for r in rows
        if r.guided is not None and r.guided.outcome.verdict is CaseVerdict.MATCH
    )
    n = len(rows)
    boost_pct = (
        boost_percent(unguided_matches, guided_matches, n) if unguided_matches else None
    )
    boost_points = 100.0 * (guided_matches - unguided_matches) / n if n else 0.0
    all_dsc = [v for r in rows for v in r.kept_tumor_dsc]
    mean_dsc = sum(all_dsc) / len(all_dsc) if all_dsc else None
    return ExperimentReport(
        seed=cfg.seed,
        backend=cfg.backend,
        rows=rows,
        unguided_matches=unguided_matches,
        guided_matches=guided_matches,
        boost_pct=boost_pct,
        boost_points=boost_points,
        mean_kept_tumor_dsc=mean_dsc,
        ap50=pooled_average_precision(rows, 0.5),
        ap70=pooled_average_precision(rows, 0.7),
    )


def _mode_dict(result: CaseResult | None) -> dict | None:
    if result is None:
        return None
    return {
        "detected": result.detected,
        "removed": result.removed,
        "kept": len(result.kept),
        "verdict": result.outcome.verdict.value,
    }


def report_json_dict(report: ExperimentReport) -> dict:
    cases = [
        {
            "case_id": row.case_id,
            "ground_truth": row.gt_count,
            "unguided": _mode_dict(row.unguided),
            "guided": _mode_dict(row.guided),
            "kept_tumor_dsc": [round(v, 6) for v in row.kept_tumor_dsc],
            "error": row.error,
        }
        for row in report.rows
    ]
    return {
        "seed": report.seed,
        "backend": report.backend,
        "n_cases": report.n_cases,
        "unguided_matches": report.unguided_matches,
        "guided_matches": report.guided_matches,
        "boost_pct": report.boost_pct,
        "boost_points": round(report.boost_points, 6),
        "mean_kept_tumor_dsc": (
            None
            if report.mean_kept_tumor_dsc is None
            else round(report.mean_kept_tumor_dsc, 6)
        ),
        "ap50": round(report.ap50, 6),
        "ap70": round(report.ap70, 6),
        "cases": cases,
    }


def render_table_csv(report: ExperimentReport) -> str:
    """Guided-run view of the cohort, one row per case."""
    lines = [",".join(CSV_COLUMNS)]
    for row in report.rows:
        if row.guided is None:
            lines.append(f"{row.case_id},{row.gt_count},error,error,error")
            continue
        verdict = VERDICT_LABELS[row.guided.outcome.verdict]
        cell = f'"{verdict}"' if "," in verdict else verdict
        lines.append(
            f"{row.case_id},{row.gt_count},{row.guided.detected},"
            f"{row.guided.removed},{cell}"
        )
    return "\n".join(lines) + "\n"


def render_summary(report: ExperimentReport) -> str:
    boost = "n/a" if report.boost_pct is None else f"{report.boost_pct:.1f}%"
    mean_dsc = (
        "n/a"
        if report.mean_kept_tumor_dsc is None
        else f"{report.mean_kept_tumor_dsc:.4f}"
    )
    errors = sum(1 for r in report.rows if r.error is not None)
    lines = [
        f"cases: {report.n_cases}",
        f"backend: {report.backend}",
        f"seed: {report.seed}",
        f"unguided matches: {report.unguided_matches}/{report.n_cases}",
        f"guided matches: {report.guided_matches}/{report.n_cases}",
        f"match boost: {boost}",
        f"match boost (points): {report.boost_points:.1f}",
        f"mean kept-tumor DSC: {mean_dsc}",
        f"AP@0.5: {report.ap50:.4f}",
        f"AP@0.7: {report.ap70:.4f}",
        f"case errors: {errors}",
    ]
    return "\n".join(lines) + "\n"


def emit_reports(report: ExperimentReport, out_dir: str | Path) -> dict[str, Path]:
    """Write table3.csv, report.json, and summary.txt into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = report_json_dict(report)
    jsonschema.validate(payload, REPORT_SCHEMA)
    paths = {
        "table": out / "table3.csv",
        "report": out / "report.json",
        "summary": out / "summary.txt",
    }
    paths["table"].write_text(render_table_csv(report), encoding="utf-8")
    paths["report"].write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    paths["summary"].write_text(render_summary(report), encoding="utf-8")
    return paths
