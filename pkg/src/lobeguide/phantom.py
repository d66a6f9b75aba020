"""Synthetic thoracic phantom cohorts with paired reports and ground truth.

A case is a torso-cropped CT-like grid: soft tissue fills the field of view,
two ellipsoidal lungs sit left and right of a mediastinum containing a small
air-filled tracheal tube, and fixed axial fissure planes split the lungs into
the five lobes. Nodules are rasterized spheres of lung background plus a
contrast offset. Everything is deterministic given a spec and a seed.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .extract import TumorPhenotype, rule_extract
from .lobes import LobeId
from .voxelcore import BBox3, LobeLabelMap, Mask, Volume, write_volume, read_volume

AIR_HU = -1000.0
LUNG_HU = -800.0
BODY_HU = 0.0
CLIP_RANGE = (-1000.0, 600.0)
SUPPRESSED_CONTRAST_HU = 80.0

# Detectable nodules must keep this margin (in voxels) of lung tissue between
# their surface and anything that is not a lobe, so no candidate component can
# bridge into the soft-tissue component.
DETECTABLE_WALL_MARGIN = 2
PAIRWISE_GAP = 3


class PhantomError(ValueError):
    """Raised when a case spec cannot be realized on the phantom grid."""


class NoduleKind(Enum):
    TRUE_TUMOR = "true_tumor"
    DISTRACTOR = "distractor"
    SUPPRESSED_TUMOR = "suppressed_tumor"


GROUND_TRUTH_KINDS = (NoduleKind.TRUE_TUMOR, NoduleKind.SUPPRESSED_TUMOR)


@dataclass(frozen=True)
class NoduleSpec:
    """One spherical nodule, placed by fractional position inside its lobe's box."""

    lobe: LobeId
    center_frac: tuple[float, float, float]
    radius_mm: float
    contrast_hu: float
    kind: NoduleKind

    def __post_init__(self) -> None:
        object.__setattr__(self, "lobe", LobeId(self.lobe))
        object.__setattr__(self, "kind", NoduleKind(self.kind))
        frac = tuple(float(f) for f in self.center_frac)
        object.__setattr__(self, "center_frac", frac)
        if len(frac) != 3 or any(not 0.0 <= f <= 1.0 for f in frac):
            raise ValueError(f"center_frac must be three values in [0,1], got {frac}")
        if self.kind is NoduleKind.SUPPRESSED_TUMOR:
            if LUNG_HU + self.contrast_hu >= -300.0:
                raise ValueError(
                    "suppressed tumors must stay below the default detector threshold"
                )
        elif self.radius_mm < 2.0:
            raise ValueError("detectable nodules need radius >= 2 mm")
        if self.radius_mm <= 0 or self.contrast_hu <= 0:
            raise ValueError("radius and contrast must be positive")

    def to_json_dict(self) -> dict:
        return {
            "lobe": self.lobe.name,
            "center_frac": list(self.center_frac),
            "radius_mm": self.radius_mm,
            "contrast_hu": self.contrast_hu,
            "kind": self.kind.value,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "NoduleSpec":
        return cls(
            lobe=LobeId.parse(d["lobe"]),
            center_frac=tuple(d["center_frac"]),
            radius_mm=float(d["radius_mm"]),
            contrast_hu=float(d["contrast_hu"]),
            kind=NoduleKind(d["kind"]),
        )


@dataclass(frozen=True)
class CaseSpec:
    """Everything needed to generate one case deterministically (plus a seed)."""

    case_id: int | str
    nodules: tuple[NoduleSpec, ...]
    noise_sigma_hu: float = 15.0
    lymph_stations: tuple[str, ...] = ()
    lobe_jitter: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "nodules", tuple(self.nodules))
        object.__setattr__(self, "lymph_stations", tuple(self.lymph_stations))
        if self.noise_sigma_hu < 0:
            raise ValueError("noise sigma must be >= 0")
        if not any(n.kind in GROUND_TRUTH_KINDS for n in self.nodules):
            raise ValueError("a case needs at least one ground-truth tumor")

    def to_json_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "nodules": [n.to_json_dict() for n in self.nodules],
            "noise_sigma_hu": self.noise_sigma_hu,
            "lymph_stations": list(self.lymph_stations),
            "lobe_jitter": self.lobe_jitter,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "CaseSpec":
        return cls(
            case_id=d["case_id"],
            nodules=tuple(NoduleSpec.from_json_dict(n) for n in d["nodules"]),
            noise_sigma_hu=float(d.get("noise_sigma_hu", 15.0)),
            lymph_stations=tuple(d.get("lymph_stations", ())),
            lobe_jitter=bool(d.get("lobe_jitter", False)),
        )


@dataclass(frozen=True)
class LobeGeometry:
    """Axis-aligned lung/lobe layout on the phantom grid (all units voxels)."""

    dims: tuple[int, int, int] = (96, 96, 96)
    right_center: tuple[float, float, float] = (48.0, 48.0, 30.0)
    left_center: tuple[float, float, float] = (48.0, 48.0, 66.0)
    right_semi: tuple[float, float, float] = (34.0, 26.0, 15.0)
    left_semi: tuple[float, float, float] = (34.0, 26.0, 15.0)
    right_fissures_z: tuple[float, float] = (36.0, 56.0)
    left_fissure_z: float = 52.0
    trachea_yx: tuple[float, float] = (10.0, 48.0)
    trachea_radius: float = 3.0
    trachea_z: tuple[int, int] = (4, 40)

    def jittered(self, rng: np.random.Generator) -> "LobeGeometry":
        """Bounded random perturbation that preserves the mediastinal gap."""
        shift_x = float(rng.uniform(-2.0, 2.0))
        dz_r, dz_l = rng.uniform(-2.0, 2.0, size=2)
        dy_r, dy_l = rng.uniform(-2.0, 2.0, size=2)
        semi_r = tuple(
            s + d for s, d in zip(self.right_semi, rng.uniform(-2.0, 2.0, size=3) * (1, 1, 0))
        )
        semi_l = tuple(
            s + d for s, d in zip(self.left_semi, rng.uniform(-2.0, 2.0, size=3) * (1, 1, 0))
        )
        f1 = self.right_fissures_z[0] + float(rng.uniform(-3.0, 3.0))
        f2 = self.right_fissures_z[1] + float(rng.uniform(-3.0, 3.0))
        fl = self.left_fissure_z + float(rng.uniform(-3.0, 3.0))
        return replace(
            self,
            right_center=(
                self.right_center[0] + dz_r,
                self.right_center[1] + dy_r,
                self.right_center[2] + shift_x,
            ),
            left_center=(
                self.left_center[0] + dz_l,
                self.left_center[1] + dy_l,
                self.left_center[2] + shift_x,
            ),
            right_semi=semi_r,
            left_semi=semi_l,
            right_fissures_z=(min(f1, f2 - 8.0), f2),
            left_fissure_z=fl,
        )

    def rasterize(self) -> LobeLabelMap:
        """Lobe label map: 0 background, 1..5 per LobeId."""
        zz, yy, xx = np.ogrid[: self.dims[0], : self.dims[1], : self.dims[2]]

        def inside(center, semi):
            return (
                ((zz - center[0]) / semi[0]) ** 2
                + ((yy - center[1]) / semi[1]) ** 2
                + ((xx - center[2]) / semi[2]) ** 2
            ) <= 1.0

        labels = np.zeros(self.dims, dtype=np.uint8)
        right = inside(self.right_center, self.right_semi)
        left = inside(self.left_center, self.left_semi)
        f1, f2 = self.right_fissures_z
        zcol = np.broadcast_to(zz, self.dims)
        labels[right & (zcol < f1)] = LobeId.RUL
        labels[right & (zcol >= f1) & (zcol < f2)] = LobeId.RML
        labels[right & (zcol >= f2)] = LobeId.RLL
        labels[left & (zcol < self.left_fissure_z)] = LobeId.LUL
        labels[left & (zcol >= self.left_fissure_z)] = LobeId.LLL
        return LobeLabelMap(labels)

    def trachea_mask(self) -> np.ndarray:
        zz, yy, xx = np.ogrid[: self.dims[0], : self.dims[1], : self.dims[2]]
        tube = ((yy - self.trachea_yx[0]) ** 2 + (xx - self.trachea_yx[1]) ** 2) <= (
            self.trachea_radius**2
        )
        zrange = (zz >= self.trachea_z[0]) & (zz < self.trachea_z[1])
        return np.broadcast_to(tube & zrange, self.dims)


@dataclass
class CohortCase:
    """One generated case: image, lobe labels, ground truth, and report."""

    case_id: int | str
    spec: CaseSpec
    volume: Volume
    lobes: LobeLabelMap
    gt_masks: list[Mask]
    gt_boxes: list[tuple[BBox3, LobeId]]
    phenotype_gt: TumorPhenotype
    report: str


def lobe_bounding_boxes(labels: LobeLabelMap) -> dict[LobeId, BBox3]:
    boxes: dict[LobeId, BBox3] = {}
    for lobe in LobeId:
        where = np.argwhere(labels.voxels == int(lobe))
        if where.size == 0:
            continue
        boxes[lobe] = BBox3(tuple(where.min(axis=0)), tuple(where.max(axis=0) + 1))
    return boxes


def _ball_offsets(radius: float) -> np.ndarray:
    r = int(np.floor(radius))
    grid = np.mgrid[-r : r + 1, -r : r + 1, -r : r + 1]
    inside = (grid**2).sum(axis=0) <= radius * radius
    return np.argwhere(inside) - r


def nodule_center(bbox: BBox3, center_frac: Sequence[float]) -> tuple[int, int, int]:
    """Map a fractional position into a lobe bounding box (inclusive ends)."""
    return tuple(
        int(round(lo + f * (hi - 1 - lo)))
        for lo, hi, f in zip(bbox.low, bbox.high, center_frac)
    )


def validate_placement(
    labels: LobeLabelMap,
    nodule: NoduleSpec,
    center: tuple[int, int, int],
    prior: Sequence[tuple[tuple[int, int, int], float]],
    name: str = "nodule",
) -> np.ndarray:
    """Check one sphere placement; returns the absolute voxel coordinates.

    The sphere must lie entirely inside its named lobe; detectable kinds also
    need DETECTABLE_WALL_MARGIN voxels of lung (any lobe) around the surface,
    and every pair of spheres must be separated by PAIRWISE_GAP voxels.
    """
    dims = labels.dims
    coords = _ball_offsets(nodule.radius_mm) + np.asarray(center)
    if coords.size == 0:
        raise PhantomError(f"{name}: radius too small to rasterize")
    if (coords < 0).any() or (coords >= np.asarray(dims)).any():
        raise PhantomError(f"{name}: sphere leaves the volume at center {center}")
    values = labels.voxels[coords[:, 0], coords[:, 1], coords[:, 2]]
    if not (values == int(nodule.lobe)).all():
        raise PhantomError(
            f"{name}: sphere at {center} is not fully inside {nodule.lobe.name}"
        )
    if nodule.kind is not NoduleKind.SUPPRESSED_TUMOR:
        margin = _ball_offsets(nodule.radius_mm + DETECTABLE_WALL_MARGIN) + np.asarray(
            center
        )
        if (margin < 0).any() or (margin >= np.asarray(dims)).any():
            raise PhantomError(f"{name}: margin shell leaves the volume")
        ring = labels.voxels[margin[:, 0], margin[:, 1], margin[:, 2]]
        if not (ring > 0).all():
            raise PhantomError(
                f"{name}: less than {DETECTABLE_WALL_MARGIN} voxels of lung "
                f"between the sphere and the chest wall"
            )
    for other_center, other_radius in prior:
        dist = float(np.linalg.norm(np.asarray(center) - np.asarray(other_center)))
        if dist < nodule.radius_mm + other_radius + PAIRWISE_GAP:
            raise PhantomError(f"{name}: overlaps another nodule at {other_center}")
    return coords


def generate_case(spec: CaseSpec, seed: int) -> CohortCase:
    """Generate one case; bit-identical for a given (spec, seed)."""
    rng = np.random.default_rng(seed)
    geometry = LobeGeometry()
    if spec.lobe_jitter:
        geometry = geometry.jittered(rng)
    labels = geometry.rasterize()
    bboxes = lobe_bounding_boxes(labels)

    hu = np.full(geometry.dims, BODY_HU, dtype=np.float64)
    hu[labels.voxels > 0] = LUNG_HU
    hu[geometry.trachea_mask()] = AIR_HU

    placements: list[tuple[tuple[int, int, int], float]] = []
    gt_masks: list[Mask] = []
    gt_boxes: list[tuple[BBox3, LobeId]] = []
    for i, nodule in enumerate(spec.nodules):
        name = f"case {spec.case_id} nodule {i} ({nodule.kind.value})"
        if nodule.lobe not in bboxes:
            raise PhantomError(f"{name}: lobe {nodule.lobe.name} is empty")
        center = nodule_center(bboxes[nodule.lobe], nodule.center_frac)
        coords = validate_placement(labels, nodule, center, placements, name=name)
        hu[coords[:, 0], coords[:, 1], coords[:, 2]] = LUNG_HU + nodule.contrast_hu
        placements.append((center, nodule.radius_mm))
        if nodule.kind in GROUND_TRUTH_KINDS:
            mask = np.zeros(geometry.dims, dtype=np.uint8)
            mask[coords[:, 0], coords[:, 1], coords[:, 2]] = 1
            box = BBox3(tuple(coords.min(axis=0)), tuple(coords.max(axis=0) + 1))
            gt_masks.append(Mask(mask))
            gt_boxes.append((box, nodule.lobe))

    if spec.noise_sigma_hu > 0:
        hu += rng.normal(0.0, spec.noise_sigma_hu, size=geometry.dims)
    hu = np.clip(hu, CLIP_RANGE[0], CLIP_RANGE[1]).astype(np.float32)

    phenotype = TumorPhenotype(
        lobes=frozenset(
            n.lobe for n in spec.nodules if n.kind in GROUND_TRUTH_KINDS
        ),
        lymph_stations=frozenset(spec.lymph_stations),
    )
    case = CohortCase(
        case_id=spec.case_id,
        spec=spec,
        volume=Volume(hu),
        lobes=labels,
        gt_masks=gt_masks,
        gt_boxes=gt_boxes,
        phenotype_gt=phenotype,
        report="",
    )
    case.report = generate_report(case, style_seed=seed)
    return case


_OPENERS = (
    "CT chest with contrast.",
    "Follow-up chest CT.",
    "Chest CT obtained for oncologic staging.",
)
_TERMS = ("tumor", "carcinoma", "malignancy")
_TUMOR_TEMPLATES = (
    "Biopsy-proven {term} involving the {full} ({abbr}).",
    "There is a determinate {term} in the {full}.",
    "Current {term} centered in the {full} ({abbr}).",
)
_DISTRACTOR_TEMPLATES = (
    "An indeterminate nodule is noted in the {full} ({abbr}).",
    "Indeterminate small nodule in the {full}.",
)
_HISTORY_TEMPLATES = (
    "History of a treated {term} in the {full}.",
    "Previously resected {term} in the {full}.",
)
_LYMPH_TEMPLATES = (
    "The station {code} lymph node is malignant.",
    "Malignant involvement of station {code} nodes.",
)
_CLOSERS = (
    "No pleural effusion.",
    "The remaining lung parenchyma is clear.",
    "Airways are patent.",
)


def generate_report(case: CohortCase, style_seed: int) -> str:
    """Render the paired report; synonym and template choice rotate by seed.

    The report states each phenotype lobe with a determinate malignancy term,
    mentions out-of-phenotype distractors as indeterminate, may add history
    sentences about other lobes, and lists malignant lymph stations.
    """
    rng = np.random.default_rng(style_seed)

    def pick(pool: tuple[str, ...]) -> str:
        return pool[int(rng.integers(0, len(pool)))]

    sentences = [pick(_OPENERS)]
    for lobe in sorted(case.phenotype_gt.lobes):
        sentences.append(
            pick(_TUMOR_TEMPLATES).format(
                term=pick(_TERMS), full=lobe.full_name, abbr=lobe.name
            )
        )
    distractor_lobes = sorted(
        {
            n.lobe
            for n in case.spec.nodules
            if n.kind is NoduleKind.DISTRACTOR and n.lobe not in case.phenotype_gt.lobes
        }
    )
    for lobe in distractor_lobes:
        sentences.append(
            pick(_DISTRACTOR_TEMPLATES).format(full=lobe.full_name, abbr=lobe.name)
        )
    other = [l for l in LobeId if l not in case.phenotype_gt.lobes]
    n_history = int(rng.integers(0, 3))
    for _ in range(n_history):
        lobe = other[int(rng.integers(0, len(other)))]
        sentences.append(
            pick(_HISTORY_TEMPLATES).format(term=pick(_TERMS), full=lobe.full_name)
        )
    for code in sorted(case.phenotype_gt.lymph_stations):
        sentences.append(pick(_LYMPH_TEMPLATES).format(code=code))
    sentences.append(pick(_CLOSERS))
    report = " ".join(sentences)
    extracted = rule_extract(report)
    if extracted != case.phenotype_gt:
        raise PhantomError(
            f"case {case.case_id}: report does not round-trip its phenotype "
            f"({extracted.to_json_dict()} vs {case.phenotype_gt.to_json_dict()})"
        )
    return report


def generate_cohort(specs: Sequence[CaseSpec], seed: int) -> list[CohortCase]:
    """Generate cases with per-case seeds derived as seed XOR case index."""
    return [generate_case(spec, seed ^ i) for i, spec in enumerate(specs)]


def table3_specs() -> list[CaseSpec]:
    """The bundled 10-case fixture cohort."""
    text = resources.files("lobeguide.data").joinpath("table3.json").read_text()
    data = json.loads(text)
    return [CaseSpec.from_json_dict(d) for d in data["cases"]]


_STATION_POOL = ("2R", "4R", "4L", "7", "10L", "10R", "11R")


def random_cohort_specs(
    n_cases: int, seed: int, allow_suppressed: bool = False
) -> list[CaseSpec]:
    """Deterministic random cohort specs validated against the default geometry."""
    rng = np.random.default_rng(seed)
    labels = LobeGeometry().rasterize()
    bboxes = lobe_bounding_boxes(labels)
    lobe_list = list(LobeId)
    specs: list[CaseSpec] = []
    for case_index in range(n_cases):
        nodules: list[NoduleSpec] = []
        placements: list[tuple[tuple[int, int, int], float]] = []

        def try_place(kind: NoduleKind, radius: float, contrast: float) -> bool:
            for _ in range(60):
                lobe = lobe_list[int(rng.integers(0, len(lobe_list)))]
                frac = tuple(rng.uniform(0.2, 0.8, size=3))
                candidate = NoduleSpec(
                    lobe=lobe,
                    center_frac=frac,
                    radius_mm=radius,
                    contrast_hu=contrast,
                    kind=kind,
                )
                center = nodule_center(bboxes[lobe], frac)
                try:
                    validate_placement(labels, candidate, center, placements)
                except PhantomError:
                    continue
                nodules.append(candidate)
                placements.append((center, radius))
                return True
            return False

        n_true = int(rng.integers(1, 3))
        for _ in range(n_true):
            radius = float(rng.uniform(4.5, 6.5))
            contrast = float(rng.uniform(560.0, 640.0))
            kind = NoduleKind.TRUE_TUMOR
            if allow_suppressed and rng.random() < 0.15:
                kind = NoduleKind.SUPPRESSED_TUMOR
                contrast = SUPPRESSED_CONTRAST_HU
            try_place(kind, radius, contrast)
        if not nodules:
            # Center placement always validates for a mid-size tumor.
            lobe = lobe_list[int(rng.integers(0, len(lobe_list)))]
            nodules.append(
                NoduleSpec(lobe, (0.5, 0.5, 0.5), 5.0, 600.0, NoduleKind.TRUE_TUMOR)
            )
        n_distract = int(rng.integers(0, 4))
        for _ in range(n_distract):
            try_place(
                NoduleKind.DISTRACTOR,
                float(rng.uniform(4.0, 5.5)),
                float(rng.uniform(560.0, 640.0)),
            )
        stations: tuple[str, ...] = ()
        if rng.random() < 0.4:
            k = int(rng.integers(1, 3))
            idx = rng.choice(len(_STATION_POOL), size=k, replace=False)
            stations = tuple(_STATION_POOL[int(i)] for i in sorted(idx))
        specs.append(
            CaseSpec(
                case_id=case_index + 1,
                nodules=tuple(nodules),
                noise_sigma_hu=float(rng.uniform(10.0, 22.0)),
                lymph_stations=stations,
            )
        )
    return specs


def save_case(case: CohortCase, out_dir: str | Path) -> None:
    """Write a case directory: volume.exnv, lobes.exnv, gt masks, report, case.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_volume(case.volume, out / "volume.exnv")
    write_volume(case.lobes, out / "lobes.exnv")
    for i, mask in enumerate(case.gt_masks):
        write_volume(mask, out / f"gt_{i:03d}.exnv")
    (out / "report.txt").write_text(case.report, encoding="utf-8")
    meta = {
        "case_id": case.case_id,
        "spec": case.spec.to_json_dict(),
        "gt_boxes": [
            {"low": list(b.low), "high": list(b.high), "lobe": lobe.name}
            for b, lobe in case.gt_boxes
        ],
        "phenotype_gt": case.phenotype_gt.to_json_dict(),
        "n_gt_masks": len(case.gt_masks),
    }
    (out / "case.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_case(case_dir: str | Path) -> CohortCase:
    """Read back a case directory written by save_case."""
    src = Path(case_dir)
    meta = json.loads((src / "case.json").read_text(encoding="utf-8"))
    volume = read_volume(src / "volume.exnv")
    lobes_vol = read_volume(src / "lobes.exnv")
    lobes = LobeLabelMap(
        lobes_vol.voxels, spacing=lobes_vol.spacing, origin=lobes_vol.origin
    )
    gt_masks = []
    for i in range(meta["n_gt_masks"]):
        m = read_volume(src / f"gt_{i:03d}.exnv")
        gt_masks.append(Mask(m.voxels, spacing=m.spacing, origin=m.origin))
    gt_boxes = [
        (BBox3(tuple(b["low"]), tuple(b["high"])), LobeId.parse(b["lobe"]))
        for b in meta["gt_boxes"]
    ]
    phenotype = TumorPhenotype(
        lobes=frozenset(LobeId.parse(l) for l in meta["phenotype_gt"]["lobes"]),
        lymph_stations=frozenset(meta["phenotype_gt"]["lymph_stations"]),
    )
    return CohortCase(
        case_id=meta["case_id"],
        spec=CaseSpec.from_json_dict(meta["spec"]),
        volume=volume,
        lobes=lobes,
        gt_masks=gt_masks,
        gt_boxes=gt_boxes,
        phenotype_gt=phenotype,
        report=(src / "report.txt").read_text(encoding="utf-8"),
    )
