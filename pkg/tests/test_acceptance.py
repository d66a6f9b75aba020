"""Acceptance gate: every shipped guarantee, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines as they
complete; each also enforces its own wall-clock budget.
"""

from __future__ import annotations

import json
import random
import time
from fractions import Fraction
from importlib import resources

import numpy as np

from lobeguide.detect import Candidate
from lobeguide.extract import (
    LobeId,
    MockBackend,
    RuleBasedBackend,
    TumorPhenotype,
    build_chat_request,
    rule_extract,
)
from lobeguide.guide import LobeAssignment, filter_candidates
from lobeguide.harness import (
    ExperimentConfig,
    default_mock_fixture_path,
    emit_reports,
    render_summary,
    render_table_csv,
    report_json_dict,
    run_experiment,
)
from lobeguide.losses import (
    BoxRegressionPair,
    FocalParams,
    ProbTargetPair,
    cross_entropy,
    cross_entropy_grad,
    dice_loss,
    dice_loss_grad,
    dual_loss,
    dual_loss_grad,
    focal_loss,
    focal_loss_grad,
    numeric_gradient,
    smooth_l1,
    smooth_l1_grad,
)
from lobeguide.metrics import (
    Detection,
    ap_from_ranked_flags,
    dsc,
    iou3d,
    match_detections,
)
from lobeguide.voxelcore import (
    AugSpec,
    BBox3,
    Mask,
    Volume,
    apply_augmentation,
    clip_intensity,
    decode_volume,
    encode_volume,
)


def _criterion(name: str, budget_s: float, fn) -> None:
    start = time.perf_counter()
    try:
        fn()
    except BaseException:
        elapsed = time.perf_counter() - start
        print(f"[FAIL] {name} ({elapsed:.2f}s)", flush=True)
        raise
    elapsed = time.perf_counter() - start
    within = elapsed <= budget_s
    print(f"[{'PASS' if within else 'FAIL'}] {name} ({elapsed:.2f}s)", flush=True)
    assert within, f"{name}: {elapsed:.2f}s exceeded the {budget_s:.0f}s budget"


# ---- 1: ten-case cohort reproduces the published table ----------------------------

EXPECTED_ROWS = [
    ("1", "1", "2", "1", "Yes"),
    ("2", "1", "1", "0", "Yes"),
    ("3", "1", "1", "0", "Yes"),
    ("4", "2", "7", "5", "Yes"),
    ("5", "2", "4", "2", "Yes"),
    ("6", "1", "0", "0", "No"),
    ("7", "2", "5", "3", "Yes"),
    ("8", "1", "4", "2", "No (FP)"),
    ("9", "1", "3", "2", "Yes"),
    ("10", "1", "1", "1", "No"),
]


def test_criterion_1_table3_reproduction():
    def body():
        report = run_experiment(ExperimentConfig(cohort="table3", seed=42, backend="rule"))
        lines = render_table_csv(report).splitlines()[1:]
        assert [tuple(line.split(",")) for line in lines] == EXPECTED_ROWS
        assert report.unguided_matches == 2
        assert report.guided_matches == 7
        assert report.boost_pct == 250.0

    _criterion("criterion 1: ten-case cohort table reproduced exactly", 60.0, body)


# ---- 2: losses match oracles; analytic gradients match numeric ones -----------------


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0)
    return float(np.max(np.abs(a - b) / scale))


def test_criterion_2_loss_values_and_gradients():
    def body():
        assert abs(cross_entropy(ProbTargetPair([0.5, 0.5], [1, 0])) - 0.693147) < 1e-6
        assert abs(cross_entropy(ProbTargetPair([0.25, 0.75], [0, 1])) - 0.287682) < 1e-6
        assert abs(dice_loss(ProbTargetPair([1, 1, 0, 0], [1, 0, 0, 0])) - 1 / 3) < 1e-5
        assert smooth_l1(BoxRegressionPair([0.5] * 6, [0.0] * 6)) == 0.125
        assert smooth_l1(BoxRegressionPair([2.0] * 6, [0.0] * 6)) == 1.5
        assert smooth_l1(BoxRegressionPair([1.0] * 6, [0.0] * 6)) == 0.5
        assert abs(focal_loss(0.9, 1) - 2.634e-4) < 1e-7
        assert abs(focal_loss(0.9, 0) - 1.39882) < 1e-4

        rng = np.random.default_rng(2024)

        def check(fn, grad_fn, x):
            analytic = grad_fn(x)
            numeric = numeric_gradient(fn, x)
            assert _rel_err(analytic, numeric) <= 1e-5

        for fn, grad_fn in (
            (cross_entropy, cross_entropy_grad),
            (dice_loss, dice_loss_grad),
            (dual_loss, dual_loss_grad),
        ):
            points = 0
            while points < 100:
                p = rng.uniform(0.05, 0.95, size=4)
                y = rng.integers(0, 2, size=4).astype(float)
                pair = ProbTargetPair(p, y)
                check(lambda v: fn(ProbTargetPair(v, y)), lambda _: grad_fn(pair), p)
                points += p.size

        points = 0
        while points < 100:
            pred = rng.uniform(-3.0, 3.0, size=6)
            gt = rng.uniform(-3.0, 3.0, size=6)
            pair = BoxRegressionPair(pred, gt)
            # skip draws near the two non-smooth loci: the delta corner of the
            # huber branch and the |.| kink of any single residual
            if abs(pair.mae - 1.0) < 1e-3 or np.min(np.abs(pred - gt)) < 1e-3:
                continue
            check(
                lambda v: smooth_l1(BoxRegressionPair(v, gt)),
                lambda _: smooth_l1_grad(pair),
                pred,
            )
            points += pred.size

        params = FocalParams()
        for _ in range(100):
            p = float(rng.uniform(0.05, 0.95))
            y = int(rng.integers(0, 2))
            analytic = focal_loss_grad(p, y, params)
            numeric = numeric_gradient(
                lambda v: focal_loss(float(v[0]), y, params), np.array([p])
            )[0]
            assert _rel_err(np.array([analytic]), np.array([numeric])) <= 1e-5

    _criterion("criterion 2: loss oracles and gradient checks", 10.0, body)


# ---- 3: overlap metrics and ranking match brute-force oracles ------------------------


def _oracle_dsc(a: Mask, b: Mask) -> float:
    xs = a.voxels.ravel().tolist()
    ys = b.voxels.ravel().tolist()
    inter = sum(1 for x, y in zip(xs, ys) if x and y)
    size = sum(1 for x in xs if x) + sum(1 for y in ys if y)
    return 1.0 if size == 0 else 2.0 * inter / size


def _cells(box: BBox3) -> set[tuple[int, int, int]]:
    return {
        (i, j, k)
        for i in range(box.low[0], box.high[0])
        for j in range(box.low[1], box.high[1])
        for k in range(box.low[2], box.high[2])
    }


def _oracle_iou(a: BBox3, b: BBox3) -> Fraction:
    ca, cb = _cells(a), _cells(b)
    return Fraction(len(ca & cb), len(ca | cb))


def _oracle_match(dets, gts, thr):
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    taken: set[int] = set()
    pairs = []
    for i in order:
        best, best_iou = None, Fraction(0)
        for gi, gt in enumerate(gts):
            if gi in taken:
                continue
            iou = _oracle_iou(dets[i].box, gt)
            if iou > best_iou:
                best, best_iou = gi, iou
        if best is not None and best_iou >= Fraction(thr).limit_denominator(10**6):
            taken.add(best)
            pairs.append((i, best))
    return pairs


def _oracle_ap(flags, n_gt):
    if n_gt == 0:
        raise ValueError
    precisions, recalls = [], []
    tp = 0
    for k, flag in enumerate(flags, start=1):
        tp += int(flag)
        precisions.append(Fraction(tp, k))
        recalls.append(Fraction(tp, n_gt))
    ap = Fraction(0)
    prev = Fraction(0)
    for k in range(len(flags)):
        if recalls[k] > prev:
            ap += (recalls[k] - prev) * max(precisions[k:])
            prev = recalls[k]
    return float(ap)


def _random_box(rnd: random.Random, extent=12) -> BBox3:
    low = tuple(rnd.randrange(0, extent - 1) for _ in range(3))
    high = tuple(rnd.randrange(lo + 1, extent) for lo in low)
    return BBox3(low, high)


def test_criterion_3_metric_oracles():
    def body():
        rng = np.random.default_rng(99)
        for _ in range(200):
            a = Mask((rng.random((16, 16, 16)) < 0.3).astype(np.uint8), (1.0, 1.0, 1.0))
            b = Mask((rng.random((16, 16, 16)) < 0.3).astype(np.uint8), (1.0, 1.0, 1.0))
            assert dsc(a, b) == _oracle_dsc(a, b)

        rnd = random.Random(7)
        for _ in range(200):
            a, b = _random_box(rnd), _random_box(rnd)
            assert abs(iou3d(a, b) - float(_oracle_iou(a, b))) < 1e-12

        for _ in range(200):
            n_det = rnd.randrange(0, 6)
            n_gt = rnd.randrange(0, 4)
            dets = [
                Detection(_random_box(rnd), rnd.randrange(0, 5) / 4.0)
                for _ in range(n_det)
            ]
            gts = [_random_box(rnd) for _ in range(n_gt)]
            result = match_detections(dets, gts, 0.25)
            expected = _oracle_match(dets, gts, 0.25)
            assert [(p.det_index, p.gt_index) for p in result.pairs] == expected
            assert result.tp == len(expected)
            if n_gt:
                matched = {d for d, _ in expected}
                flags = [
                    i in matched
                    for i in sorted(range(n_det), key=lambda i: (-dets[i].score, i))
                ]
                assert (
                    abs(ap_from_ranked_flags(flags, n_gt) - _oracle_ap(flags, n_gt))
                    < 1e-12
                )

    _criterion("criterion 3: metric brute-force oracles", 30.0, body)


# ---- 4: fifty-case random cohort quality floor ------------------------------------


def test_criterion_4_random_cohort_quality():
    def body():
        report = run_experiment(
            ExperimentConfig(cohort="random", random_cases=50, seed=42)
        )
        recalls = []
        for row in report.rows:
            assert row.error is None
            outcome = row.unguided.outcome
            recalls.append(outcome.tp / row.gt_count)
            guided_kept = {c.box for c in row.guided.kept}
            unguided_kept = {c.box for c in row.unguided.kept}
            assert guided_kept <= unguided_kept
        assert min(recalls) >= 0.9
        assert report.mean_kept_tumor_dsc is not None
        assert report.mean_kept_tumor_dsc >= 0.8

    _criterion("criterion 4: fifty-case cohort quality floor", 300.0, body)


# ---- 5: rule extraction exact on the bundled corpus ---------------------------------


def test_criterion_5_report_corpus():
    def body():
        corpus = json.loads(
            resources.files("lobeguide.data")
            .joinpath("report_corpus.json")
            .read_text(encoding="utf-8")
        )
        assert len(corpus["reports"]) == 30
        rule = RuleBasedBackend()
        mock = MockBackend.from_file(default_mock_fixture_path())
        for entry in corpus["reports"]:
            expected = TumorPhenotype(
                lobes=frozenset(LobeId.parse(x) for x in entry["expected"]["lobes"]),
                lymph_stations=frozenset(entry["expected"]["lymph_stations"]),
            )
            assert rule.extract(entry["report"]) == expected, entry["id"]
            assert mock.extract(entry["report"]) == expected, entry["id"]

    _criterion("criterion 5: bundled report corpus extraction", 5.0, body)


# ---- 6: wire format goldens ---------------------------------------------------------


def test_criterion_6_wire_goldens():
    def body():
        data = resources.files("lobeguide.data")
        sample = data.joinpath("golden/sample_report.txt").read_text(encoding="utf-8")
        for kind in ("lobe", "lymph"):
            expected = data.joinpath(f"golden/chat_request_{kind}.json").read_bytes()
            assert build_chat_request(sample, kind).to_json_bytes() == expected

    _criterion("criterion 6: chat wire-format goldens", 30.0, body)


# ---- 7: determinism ------------------------------------------------------------------


def test_criterion_7_determinism(tmp_path):
    def body():
        cfg = ExperimentConfig(cohort="table3", seed=42)
        first = run_experiment(cfg)
        second = run_experiment(cfg)
        paths_a = emit_reports(first, tmp_path / "a")
        paths_b = emit_reports(second, tmp_path / "b")
        for key in paths_a:
            assert paths_a[key].read_bytes() == paths_b[key].read_bytes()
        assert render_summary(first) == render_summary(second)
        assert report_json_dict(first) == report_json_dict(second)

        rng = np.random.default_rng(5)
        for i in range(20):
            dims = tuple(int(d) for d in rng.integers(1, 24, size=3))
            spacing = tuple(float(s) for s in rng.uniform(0.5, 3.0, size=3))
            origin = tuple(float(o) for o in rng.uniform(-100.0, 100.0, size=3))
            if i % 2 == 0:
                voxels = rng.uniform(-1000, 600, size=dims).astype(np.float32)
            else:
                voxels = rng.integers(0, 6, size=dims).astype(np.uint8)
            vol = Volume(voxels, spacing, origin)
            back = decode_volume(encode_volume(vol))
            assert back.voxels.tobytes() == vol.voxels.tobytes()
            assert back.voxels.dtype == vol.voxels.dtype
            assert back.spacing == vol.spacing
            assert back.origin == vol.origin

    _criterion("criterion 7: byte-identical reruns and codec roundtrip", 120.0, body)


# ---- 8: randomized invariants --------------------------------------------------------


def test_criterion_8_randomized_invariants():
    def body():
        rnd = random.Random(1)
        rng = np.random.default_rng(1)
        trials = 0

        def random_candidate() -> Candidate:
            box = _random_box(rnd)
            centroid = tuple((l + h - 1) / 2.0 for l, h in zip(box.low, box.high))
            return Candidate(box=box, score=rnd.random(), centroid=centroid)

        for _ in range(220):  # filter partition + guided subset
            cands = [random_candidate() for _ in range(rnd.randrange(0, 7))]
            assignments = [
                LobeAssignment(i, rnd.choice(list(LobeId) + [None]), 1.0)
                for i in range(len(cands))
            ]
            phenotype = TumorPhenotype(
                frozenset(rnd.sample(list(LobeId), rnd.randrange(1, 6))), frozenset()
            )
            guided = filter_candidates(cands, assignments, phenotype)
            unguided = filter_candidates(cands, assignments, None)
            combined = (
                guided.kept + guided.removed_by_phenotype + guided.discarded_no_lobe
            )
            assert sorted(id(c) for c in combined) == sorted(id(c) for c in cands)
            assert {id(c) for c in guided.kept} <= {id(c) for c in unguided.kept}
            trials += 2

        for _ in range(220):  # tp monotone in the IoU threshold
            dets = [
                Detection(_random_box(rnd), rnd.random())
                for _ in range(rnd.randrange(0, 6))
            ]
            gts = [_random_box(rnd) for _ in range(rnd.randrange(0, 4))]
            lo = rnd.uniform(0.05, 0.5)
            hi = rnd.uniform(lo, 1.0)
            assert match_detections(dets, gts, hi).tp <= match_detections(dets, gts, lo).tp
            trials += 1

        for _ in range(220):  # flip involution
            dims = tuple(int(d) for d in rng.integers(1, 10, size=3))
            vol = Volume(rng.uniform(-1000, 600, size=dims).astype(np.float32), (1, 1, 1))
            mask = Mask((rng.random(dims) < 0.4).astype(np.uint8), (1, 1, 1))
            spec = AugSpec(flip_axes=tuple(bool(b) for b in rng.integers(0, 2, size=3)))
            seed = int(rng.integers(0, 2**31))
            v1, m1 = apply_augmentation(vol, mask, spec, seed)
            v2, m2 = apply_augmentation(v1, m1, spec, seed)
            assert np.array_equal(v2.voxels, vol.voxels)
            assert np.array_equal(m2.voxels, mask.voxels)
            trials += 1

        for _ in range(220):  # clip idempotence
            dims = tuple(int(d) for d in rng.integers(1, 10, size=3))
            vol = Volume(rng.uniform(-2000, 2000, size=dims).astype(np.float32), (1, 1, 1))
            lo, hi = sorted(rng.uniform(-1500, 1500, size=2).tolist())
            once = clip_intensity(vol, lo, hi)
            twice = clip_intensity(once, lo, hi)
            assert np.array_equal(once.voxels, twice.voxels)
            assert once.voxels.min() >= lo and once.voxels.max() <= hi
            trials += 1

        assert trials >= 1000

    _criterion("criterion 8: randomized invariants (>=1000 trials)", 120.0, body)
