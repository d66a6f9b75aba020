"""Classical nodule candidate detector and per-candidate segmentation.

Candidates are supra-threshold connected components found inside lung-density
context, collected over sliding patches and merged with NMS. The stand-in
classifier score is the component's mean contrast over its local sub-threshold
surroundings, normalized by 600 HU.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .voxelcore import BBox3, Mask, PatchWindow, Volume, sliding_patches
from .metrics import iou3d

LUNG_CONTEXT_MAX_MEAN_HU = -400.0
CONTEXT_RADIUS_MM = 5.0
SCORE_CONTRAST_SCALE_HU = 600.0


@dataclass(frozen=True)
class DetectorConfig:
    """Thresholds and window sizes for the candidate detector."""

    hu_threshold: float = -300.0
    min_volume_mm3: float = 14.0
    max_volume_mm3: float = 1.4e5
    classifier_threshold: float = 0.5
    nms_iou: float = 0.1
    detect_patch: tuple[int, int, int] = (96, 96, 96)
    segment_patch: tuple[int, int, int] = (64, 64, 64)

    def __post_init__(self) -> None:
        if not 0 < self.min_volume_mm3 < self.max_volume_mm3:
            raise ValueError("volume bounds must satisfy 0 < min < max")
        if not 0.0 <= self.classifier_threshold <= 1.0:
            raise ValueError("classifier_threshold must lie in [0, 1]")
        if not 0.0 <= self.nms_iou < 1.0:
            raise ValueError("nms_iou must lie in [0, 1)")
        for name, patch in (("detect_patch", self.detect_patch), ("segment_patch", self.segment_patch)):
            if len(patch) != 3 or any(p < 1 for p in patch):
                raise ValueError(f"{name} must be three positive ints")

    def to_json_dict(self) -> dict:
        return {
            "hu_threshold": self.hu_threshold,
            "min_volume_mm3": self.min_volume_mm3,
            "max_volume_mm3": self.max_volume_mm3,
            "classifier_threshold": self.classifier_threshold,
            "nms_iou": self.nms_iou,
            "detect_patch": list(self.detect_patch),
            "segment_patch": list(self.segment_patch),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "DetectorConfig":
        kwargs = dict(d)
        for key in ("detect_patch", "segment_patch"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


@dataclass(frozen=True)
class Candidate:
    """A detected nodule candidate in full-volume voxel coordinates."""

    box: BBox3
    score: float
    centroid: tuple[float, float, float]

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")
        for c, lo, hi in zip(self.centroid, self.box.low, self.box.high):
            if not lo <= c < hi:
                raise ValueError("centroid must lie inside the box")

    def to_json_dict(self) -> dict:
        return {
            "box_min": list(self.box.low),
            "box_max": list(self.box.high),
            "score": self.score,
            "centroid": list(self.centroid),
        }


def _require_isotropic(vol: Volume) -> float:
    s = vol.spacing
    if not (s[0] == s[1] == s[2]):
        raise ValueError(f"detector requires an isotropic volume, got spacing {s}")
    return s[0]


def _context_mean(hu: np.ndarray, spacing: float) -> np.ndarray:
    size = 2 * max(1, round(CONTEXT_RADIUS_MM / spacing)) + 1
    return ndimage.uniform_filter(hu.astype(np.float64), size=size, mode="nearest")


def nms(cands: Sequence[Candidate], iou_thr: float) -> list[Candidate]:
    """Greedy suppression: drop a candidate iff its IoU with an already kept,
    higher-ranked candidate exceeds iou_thr. Rank order is score descending,
    then box low corner, then high corner."""
    ranked = sorted(cands, key=lambda c: (-c.score, c.box.low, c.box.high))
    kept: list[Candidate] = []
    for cand in ranked:
        if all(iou3d(cand.box, k.box) <= iou_thr for k in kept):
            kept.append(cand)
    return kept


def _component_score(
    hu: np.ndarray,
    box: BBox3,
    comp_coords: tuple[np.ndarray, ...],
    below: np.ndarray,
    global_background: float,
    margin: int,
) -> float:
    comp_mean = float(hu[comp_coords].mean())
    lo = [max(0, l - margin) for l in box.low]
    hi = [min(d, h + margin) for h, d in zip(box.high, hu.shape)]
    region = tuple(slice(l, h) for l, h in zip(lo, hi))
    ring = below[region]
    background = float(hu[region][ring].mean()) if ring.any() else global_background
    score = (comp_mean - background) / SCORE_CONTRAST_SCALE_HU
    return float(min(1.0, max(0.0, score)))


def detect_candidates(
    vol: Volume, cfg: DetectorConfig = DetectorConfig()
) -> list[Candidate]:
    """Find scored nodule candidates on an isotropic intensity volume.

    Per patch: threshold at hu_threshold restricted to lung-density context
    (5 mm-neighborhood mean below -400 HU), take 26-connected components, box
    and score them; then merge across patches with NMS and drop candidates by
    classifier threshold and box-volume bounds.
    """
    if vol.is_label:
        raise ValueError("detector expects an intensity volume")
    spacing = _require_isotropic(vol)
    hu = vol.voxels
    context = _context_mean(hu, spacing)
    supra = hu > cfg.hu_threshold
    candidate_mask = supra & (context < LUNG_CONTEXT_MAX_MEAN_HU)
    below = ~supra
    global_background = float(hu[below].mean()) if below.any() else float(hu.mean())
    margin = max(1, round(CONTEXT_RADIUS_MM / spacing))

    stride = tuple(max(1, p // 2) for p in cfg.detect_patch)
    structure = ndimage.generate_binary_structure(3, 3)
    raw: list[Candidate] = []
    for window in sliding_patches(vol.dims, cfg.detect_patch, stride):
        sl = tuple(
            slice(s, min(s + p, d))
            for s, p, d in zip(window.start, window.size, vol.dims)
        )
        sub = candidate_mask[sl]
        labeled, count = ndimage.label(sub, structure=structure)
        if count == 0:
            continue
        offsets = np.array([s.start for s in sl])
        for index, obj in enumerate(ndimage.find_objects(labeled), start=1):
            if obj is None:
                continue
            local = labeled[obj] == index
            coords_local = np.nonzero(local)
            box = BBox3(
                tuple(int(o.start + off) for o, off in zip(obj, offsets)),
                tuple(int(o.stop + off) for o, off in zip(obj, offsets)),
            )
            comp_coords = tuple(
                c + o.start + off for c, o, off in zip(coords_local, obj, offsets)
            )
            centroid = tuple(float(c.mean()) for c in comp_coords)
            score = _component_score(
                hu, box, comp_coords, below, global_background, margin
            )
            raw.append(Candidate(box=box, score=score, centroid=centroid))

    merged = nms(raw, cfg.nms_iou)
    voxel_mm3 = spacing**3
    final = [
        c
        for c in merged
        if c.score >= cfg.classifier_threshold
        and cfg.min_volume_mm3 <= c.box.volume_voxels * voxel_mm3 <= cfg.max_volume_mm3
    ]
    return final


def segment_candidate(
    vol: Volume, cand: Candidate, cfg: DetectorConfig = DetectorConfig()
) -> Mask:
    """Segment one candidate inside a segment_patch crop around its centroid.

    The crop is thresholded at hu_threshold and the connected component
    containing (or nearest to) the patch center is kept, re-embedded in the
    full volume geometry.
    """
    if vol.is_label:
        raise ValueError("segmentation expects an intensity volume")
    _require_isotropic(vol)
    center = tuple(int(round(c)) for c in cand.centroid)
    for c, d in zip(center, vol.dims):
        if not 0 <= c < d:
            raise ValueError(f"centroid {cand.centroid} outside volume dims {vol.dims}")
    start = [c - p // 2 for c, p in zip(center, cfg.segment_patch)]
    lo = [max(0, s) for s in start]
    hi = [min(d, s + p) for s, p, d in zip(start, cfg.segment_patch, vol.dims)]
    region = tuple(slice(l, h) for l, h in zip(lo, hi))
    sub = vol.voxels[region] > cfg.hu_threshold
    labeled, count = ndimage.label(sub, structure=ndimage.generate_binary_structure(3, 3))
    out = np.zeros(vol.dims, dtype=np.uint8)
    if count > 0:
        center_local = tuple(c - l for c, l in zip(center, lo))
        target = int(labeled[center_local])
        if target == 0:
            coords = np.argwhere(labeled > 0)
            d2 = ((coords - np.asarray(center_local)) ** 2).sum(axis=1)
            order = np.lexsort(
                (coords[:, 2], coords[:, 1], coords[:, 0], d2)
            )
            target = int(labeled[tuple(coords[order[0]])])
        out[region][labeled == target] = 1
    return Mask(out, spacing=vol.spacing, origin=vol.origin)
