"""Command-line entry points, thin wrappers over the library functions."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .detect import DetectorConfig, detect_candidates
from .extract import MockBackend, ChatBackend, PromptTemplate, RuleBasedBackend, extract_phenotype
from .guide import PipelineMode, run_pipeline
from .harness import (
    ExperimentConfig,
    emit_reports,
    render_summary,
    run_experiment,
)
from .phantom import generate_cohort, load_case, random_cohort_specs, save_case, table3_specs
from .voxelcore import read_volume


def _dump(payload: dict, out: str | None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _load_specs(source: str, seed: int, n_cases: int) -> list:
    if source == "table3":
        return table3_specs()
    if source == "random":
        return random_cohort_specs(n_cases, seed)
    from .phantom import CaseSpec

    data = json.loads(Path(source).read_text(encoding="utf-8"))
    return [CaseSpec.from_json_dict(d) for d in data["cases"]]


def _make_backend(name: str, fixtures: str | None, endpoint: str | None):
    if name == "rule":
        return RuleBasedBackend()
    if name == "mock":
        from .harness import default_mock_fixture_path

        return MockBackend.from_file(fixtures or default_mock_fixture_path())
    if not endpoint:
        raise SystemExit("chat backend requires --endpoint")
    return ChatBackend(endpoint=endpoint, template=PromptTemplate())


def _case_dir_name(case_id) -> str:
    return f"case_{case_id:03d}" if isinstance(case_id, int) else f"case_{case_id}"


def cmd_phantom_gen(args: argparse.Namespace) -> int:
    specs = _load_specs(args.spec, args.seed, args.cases)
    cohort = generate_cohort(specs, args.seed)
    out = Path(args.out)
    for case in cohort:
        case_dir = out / _case_dir_name(case.case_id)
        save_case(case, case_dir)
        print(case_dir)
    return 0


def cmd_detect(args: argparse.Namespace) -> int:
    vol = read_volume(args.vol)
    cfg = (
        DetectorConfig.from_json_dict(json.loads(Path(args.config).read_text(encoding="utf-8")))
        if args.config
        else DetectorConfig()
    )
    cands = detect_candidates(vol, cfg)
    _dump({"candidates": [c.to_json_dict() for c in cands]}, args.out)
    return 0


def cmd_extract(args: argparse.Namespace) -> int:
    report = Path(args.report).read_text(encoding="utf-8")
    backend = _make_backend(args.backend, args.fixtures, args.endpoint)
    phenotype = extract_phenotype(report, backend)
    _dump(phenotype.to_json_dict(), args.out)
    return 0


def cmd_pipeline(args: argparse.Namespace) -> int:
    case = load_case(args.case)
    cfg = (
        DetectorConfig.from_json_dict(json.loads(Path(args.config).read_text(encoding="utf-8")))
        if args.config
        else DetectorConfig()
    )
    mode = PipelineMode(args.mode)
    backend = (
        _make_backend(args.backend, args.fixtures, args.endpoint)
        if mode is PipelineMode.GUIDED
        else None
    )
    result = run_pipeline(case, mode, cfg, backend)
    payload = {
        "case_id": result.case_id,
        "mode": result.mode.value,
        "detected": result.detected,
        "removed": result.removed,
        "kept": [c.to_json_dict() for c in result.kept],
        "verdict": result.outcome.verdict.value,
        "tp": result.outcome.tp,
        "fp": result.outcome.fp,
        "fn": result.outcome.fn,
        "phenotype": None if result.phenotype is None else result.phenotype.to_json_dict(),
    }
    _dump(payload, args.out)
    return 0


def cmd_eval_run(args: argparse.Namespace) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    report = run_experiment(cfg)
    emit_reports(report, args.out)
    sys.stdout.write(render_summary(report))
    return 0


def cmd_eval_table3(args: argparse.Namespace) -> int:
    cfg = ExperimentConfig(cohort="table3", seed=args.seed, backend=args.backend)
    report = run_experiment(cfg)
    emit_reports(report, args.out)
    sys.stdout.write(render_summary(report))
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service.app import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lobeguide",
        description="Synthetic-phantom lung nodule detection with report-guided filtering.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_phantom = sub.add_parser("phantom", help="phantom cohort tools")
    phantom_sub = p_phantom.add_subparsers(dest="phantom_command", required=True)
    p_gen = phantom_sub.add_parser("gen", help="generate cases to disk")
    p_gen.add_argument("--spec", default="table3", help="table3, random, or a spec JSON path")
    p_gen.add_argument("--seed", type=int, default=42)
    p_gen.add_argument("--cases", type=int, default=10, help="case count for --spec random")
    p_gen.add_argument("--out", required=True, help="output directory")
    p_gen.set_defaults(func=cmd_phantom_gen)

    p_detect = sub.add_parser("detect", help="detect candidates in a volume")
    p_detect.add_argument("--vol", required=True, help="EXNV intensity volume")
    p_detect.add_argument("--config", help="detector config JSON")
    p_detect.add_argument("--out", help="output JSON path (default stdout)")
    p_detect.set_defaults(func=cmd_detect)

    p_extract = sub.add_parser("extract", help="extract a tumor phenotype from a report")
    p_extract.add_argument("--report", required=True, help="report text file")
    p_extract.add_argument("--backend", choices=("rule", "chat", "mock"), default="rule")
    p_extract.add_argument("--fixtures", help="mock backend fixture JSON")
    p_extract.add_argument("--endpoint", help="chat backend endpoint URL")
    p_extract.add_argument("--out", help="output JSON path (default stdout)")
    p_extract.set_defaults(func=cmd_extract)

    p_pipe = sub.add_parser("pipeline", help="run one saved case through the pipeline")
    p_pipe.add_argument("--case", required=True, help="case directory from phantom gen")
    p_pipe.add_argument("--mode", choices=("unguided", "guided"), required=True)
    p_pipe.add_argument("--config", help="detector config JSON")
    p_pipe.add_argument("--backend", choices=("rule", "chat", "mock"), default="rule")
    p_pipe.add_argument("--fixtures", help="mock backend fixture JSON")
    p_pipe.add_argument("--endpoint", help="chat backend endpoint URL")
    p_pipe.add_argument("--out", help="output JSON path (default stdout)")
    p_pipe.set_defaults(func=cmd_pipeline)

    p_eval = sub.add_parser("eval", help="cohort experiments")
    eval_sub = p_eval.add_subparsers(dest="eval_command", required=True)
    p_run = eval_sub.add_parser("run", help="run an experiment from a config file")
    p_run.add_argument("--config", required=True, help="experiment config JSON")
    p_run.add_argument("--out", default="eval_out", help="artifact directory")
    p_run.set_defaults(func=cmd_eval_run)
    p_t3 = eval_sub.add_parser("table3", help="run the bundled ten-case cohort")
    p_t3.add_argument("--seed", type=int, default=42)
    p_t3.add_argument("--backend", choices=("rule", "mock"), default="rule")
    p_t3.add_argument("--out", default="table3_out", help="artifact directory")
    p_t3.set_defaults(func=cmd_eval_table3)

    p_serve = sub.add_parser("serve", help="run the HTTP service")
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8000)
    p_serve.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
