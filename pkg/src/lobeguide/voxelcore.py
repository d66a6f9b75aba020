"""3D voxel grids with physical geometry, preprocessing ops, augmentation, and file IO.

Conventions used throughout the package:

  * arrays are indexed (z, y, x) with z the axial axis;
  * dims are voxel counts per axis, spacing is mm per voxel, origin is the mm
    position of voxel (0, 0, 0);
  * intensity volumes are float32 HU, label volumes are uint8;
  * boxes are half-open: the low corner is inclusive, the high corner exclusive.

The on-disk format (EXNV v1) is a fixed 68-byte little-endian header followed by
the raw voxel payload in C order (z outermost, x innermost):

  bytes 0-3   magic "EXNV"
  byte  4     version (1)
  byte  5     dtype code (1 = float32 intensity, 2 = uint8 label)
  bytes 6-7   reserved, zero
  bytes 8-19  dims, 3 x uint32
  bytes 20-43 spacing, 3 x float64
  bytes 44-67 origin, 3 x float64
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .lobes import LobeId

INTENSITY_PAD_HU = -1000.0
LABEL_PAD = 0

_MAGIC = b"EXNV"
_VERSION = 1
_DTYPE_INTENSITY = 1
_DTYPE_LABEL = 2
_HEADER = struct.Struct("<4sBBH3I3d3d")


class VolumeFormatError(ValueError):
    """Base class for EXNV read failures."""


class MalformedHeaderError(VolumeFormatError):
    """Magic, version, or header layout is wrong."""


class UnknownDtypeError(VolumeFormatError):
    """The header names a dtype code this version does not define."""


class TruncatedPayloadError(VolumeFormatError):
    """The payload length does not match the dims product."""


@dataclass(frozen=True)
class BBox3:
    """Axis-aligned voxel box; low corner inclusive, high corner exclusive."""

    low: tuple[int, int, int]
    high: tuple[int, int, int]

    def __post_init__(self) -> None:
        low = tuple(int(v) for v in self.low)
        high = tuple(int(v) for v in self.high)
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)
        if len(low) != 3 or len(high) != 3:
            raise ValueError("BBox3 corners must have 3 components")
        if any(h <= l for l, h in zip(low, high)):
            raise ValueError(f"degenerate box: low={low} high={high}")

    @property
    def size(self) -> tuple[int, int, int]:
        return tuple(h - l for l, h in zip(self.low, self.high))

    @property
    def volume_voxels(self) -> int:
        out = 1
        for s in self.size:
            out *= s
        return out

    @property
    def center(self) -> tuple[float, float, float]:
        return tuple((l + h) / 2.0 for l, h in zip(self.low, self.high))

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(l, h) for l, h in zip(self.low, self.high))


@dataclass(frozen=True)
class PatchWindow:
    """One sliding-window placement: start voxel and window size per axis."""

    start: tuple[int, int, int]
    size: tuple[int, int, int]


@dataclass
class Volume:
    """A 3D grid of voxels plus physical geometry.

    voxels: float32 for intensity (HU) or uint8 for labels, indexed (z, y, x).
    """

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        arr = np.asarray(self.voxels)
        if arr.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {arr.shape}")
        if any(d < 1 for d in arr.shape):
            raise ValueError(f"dims must be >= 1, got {arr.shape}")
        if np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32, copy=False)
        elif np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
            if arr.size and (arr.min() < 0 or arr.max() > 255):
                raise ValueError("label voxels must fit uint8")
            arr = arr.astype(np.uint8, copy=False)
        else:
            raise ValueError(f"unsupported voxel dtype {arr.dtype}")
        self.voxels = arr
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be 3 positive reals, got {self.spacing}")
        if len(self.origin) != 3:
            raise ValueError("origin must have 3 components")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape

    @property
    def is_label(self) -> bool:
        return self.voxels.dtype == np.uint8

    def same_geometry(self, other: "Volume") -> bool:
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and self.origin == other.origin
        )


class Mask(Volume):
    """A binary volume; values are exactly 0 or 1, geometry as in Volume."""

    def __post_init__(self) -> None:
        arr = np.asarray(self.voxels)
        if arr.dtype == np.bool_ or np.issubdtype(arr.dtype, np.integer):
            self.voxels = arr.astype(np.uint8, copy=False)
        else:
            raise ValueError("mask voxels must be integer or boolean")
        super().__post_init__()
        if self.voxels.size and self.voxels.max() > 1:
            raise ValueError("mask voxels must be 0 or 1")

    @property
    def count(self) -> int:
        return int(self.voxels.sum())


class LobeLabelMap(Volume):
    """A label volume whose values are 0 (background) or LobeId codes 1..5."""

    def __post_init__(self) -> None:
        super().__post_init__()
        if not self.is_label:
            raise ValueError("lobe label map must be a label volume")
        if self.voxels.size and self.voxels.max() > max(LobeId):
            raise ValueError("lobe labels must be in 0..5")


@dataclass(frozen=True)
class AugSpec:
    """Augmentation parameters; every default is the identity.

    rotation_deg and scale are uniform sampling ranges; flip_axes marks axes
    eligible for a random flip; noise is additive Gaussian in HU; blur is a
    Gaussian with sigma in mm; brightness/contrast/gamma are intensity-only
    sampling ranges; crop_size, when set, takes a random crop of that size.
    """

    rotation_deg: tuple[float, float] = (0.0, 0.0)
    scale: tuple[float, float] = (1.0, 1.0)
    flip_axes: tuple[bool, bool, bool] = (False, False, False)
    noise_sigma_hu: float = 0.0
    blur_sigma_mm: float = 0.0
    brightness_hu: tuple[float, float] = (0.0, 0.0)
    contrast: tuple[float, float] = (1.0, 1.0)
    gamma: tuple[float, float] = (1.0, 1.0)
    crop_size: tuple[int, int, int] | None = None

    def __post_init__(self) -> None:
        for name, rng in (
            ("rotation_deg", self.rotation_deg),
            ("scale", self.scale),
            ("brightness_hu", self.brightness_hu),
            ("contrast", self.contrast),
            ("gamma", self.gamma),
        ):
            if len(rng) != 2 or rng[0] > rng[1]:
                raise ValueError(f"{name} must be an ordered (lo, hi) pair, got {rng}")
        if not (-30.0 <= self.rotation_deg[0] and self.rotation_deg[1] <= 30.0):
            raise ValueError("rotation_deg must lie within [-30, 30]")
        if not (0.70 <= self.scale[0] and self.scale[1] <= 1.40):
            raise ValueError("scale must lie within [0.70, 1.40]")
        if self.gamma[0] <= 0:
            raise ValueError("gamma must be positive")
        if self.noise_sigma_hu < 0 or self.blur_sigma_mm < 0:
            raise ValueError("noise and blur sigmas must be >= 0")
        if len(self.flip_axes) != 3:
            raise ValueError("flip_axes must have 3 components")
        if self.crop_size is not None and any(c < 1 for c in self.crop_size):
            raise ValueError("crop_size components must be >= 1")


def resample_to_isotropic(vol: Volume, target_spacing: float) -> Volume:
    """Resample to a cubic grid with the given spacing in mm.

    Output dims are round(dims * spacing / target) per axis, at least 1. Output
    voxel j samples input coordinate j * target / spacing along each axis, so
    voxel (0,0,0) centers align and the origin is preserved. Intensity volumes
    interpolate trilinearly, label volumes by nearest neighbor.
    """
    if target_spacing <= 0:
        raise ValueError(f"target spacing must be positive, got {target_spacing}")
    out_dims = tuple(
        max(1, round(d * s / target_spacing)) for d, s in zip(vol.dims, vol.spacing)
    )
    coords = np.meshgrid(
        *(
            np.arange(n, dtype=np.float64) * (target_spacing / s)
            for n, s in zip(out_dims, vol.spacing)
        ),
        indexing="ij",
    )
    if vol.is_label:
        out = ndimage.map_coordinates(vol.voxels, coords, order=0, mode="nearest")
    else:
        out = ndimage.map_coordinates(
            vol.voxels.astype(np.float64), coords, order=1, mode="nearest"
        ).astype(np.float32)
    spacing = (target_spacing,) * 3
    return type(vol)(out, spacing=spacing, origin=vol.origin)


def clip_intensity(vol: Volume, lo: float, hi: float) -> Volume:
    """Clamp intensity voxels to [lo, hi]. Label volumes are rejected."""
    if vol.is_label:
        raise ValueError("clip_intensity does not apply to label volumes")
    if not lo < hi:
        raise ValueError(f"clip bounds must satisfy lo < hi, got ({lo}, {hi})")
    out = np.clip(vol.voxels, np.float32(lo), np.float32(hi))
    return Volume(out, spacing=vol.spacing, origin=vol.origin)


def _cc_structure(connectivity: int) -> np.ndarray:
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


def mask_to_bboxes(mask: Mask, connectivity: int = 26) -> list[BBox3]:
    """Tight box per connected foreground component, ordered by (low, high)."""
    structure = _cc_structure(connectivity)
    labeled, count = ndimage.label(mask.voxels, structure=structure)
    boxes: list[BBox3] = []
    for obj in ndimage.find_objects(labeled):
        if obj is None:
            continue
        boxes.append(
            BBox3(tuple(s.start for s in obj), tuple(s.stop for s in obj))
        )
    boxes.sort(key=lambda b: (b.low, b.high))
    return boxes


def sliding_patches(
    dims: Sequence[int], patch: Sequence[int], stride: Sequence[int]
) -> list[PatchWindow]:
    """Window placements covering every voxel.

    Starts are multiples of the stride, with the final start clamped so
    start + patch <= dims. An axis shorter than the patch yields a single
    window at 0 over the zero-padded extent.
    """
    if len(dims) != 3 or len(patch) != 3 or len(stride) != 3:
        raise ValueError("dims, patch, and stride must have 3 components")
    if any(p < 1 for p in patch) or any(s < 1 for s in stride):
        raise ValueError("patch and stride components must be >= 1")
    if any(s > p for p, s in zip(patch, stride)):
        raise ValueError("stride must not exceed the patch size (coverage gap)")
    per_axis: list[list[int]] = []
    for d, p, st in zip(dims, patch, stride):
        if d <= p:
            per_axis.append([0])
            continue
        starts = []
        s = 0
        while True:
            if s + p >= d:
                starts.append(min(s, d - p))
                break
            starts.append(s)
            s += st
        per_axis.append(starts)
    windows = []
    size = tuple(int(p) for p in patch)
    for a in per_axis[0]:
        for b in per_axis[1]:
            for c in per_axis[2]:
                windows.append(PatchWindow((a, b, c), size))
    return windows


def crop_patch(vol: Volume, center: Sequence[int], size: Sequence[int]) -> Volume:
    """Extract a size-shaped patch centered (floor convention) on a voxel.

    Regions outside the volume are padded with -1000 HU for intensity and 0
    for labels. The center must lie in [-size, dims + size) per axis.
    """
    if len(center) != 3 or len(size) != 3:
        raise ValueError("center and size must have 3 components")
    if any(s < 1 for s in size):
        raise ValueError("size components must be >= 1")
    for c, s, d in zip(center, size, vol.dims):
        if not (-s <= c < d + s):
            raise ValueError(
                f"center {tuple(center)} out of range for dims {vol.dims} and size {tuple(size)}"
            )
    pad = LABEL_PAD if vol.is_label else INTENSITY_PAD_HU
    out = np.full(tuple(size), pad, dtype=vol.voxels.dtype)
    start = [int(c) - int(s) // 2 for c, s in zip(center, size)]
    src_lo = [max(0, st) for st in start]
    src_hi = [min(d, st + s) for st, s, d in zip(start, size, vol.dims)]
    if all(lo < hi for lo, hi in zip(src_lo, src_hi)):
        dst = tuple(
            slice(lo - st, hi - st) for lo, hi, st in zip(src_lo, src_hi, start)
        )
        src = tuple(slice(lo, hi) for lo, hi in zip(src_lo, src_hi))
        out[dst] = vol.voxels[src]
    origin = tuple(
        o + st * sp for o, st, sp in zip(vol.origin, start, vol.spacing)
    )
    return type(vol)(out, spacing=vol.spacing, origin=origin)


def _rotation_matrix(angles_deg: np.ndarray) -> np.ndarray:
    # Rotations about the z, y, and x axes, composed in that order, acting on
    # (z, y, x) index vectors.
    az, ay, ax = (math.radians(a) for a in angles_deg)
    cz, sz = math.cos(az), math.sin(az)
    cy, sy = math.cos(ay), math.sin(ay)
    cx, sx = math.cos(ax), math.sin(ax)
    rz = np.array([[1, 0, 0], [0, cz, -sz], [0, sz, cz]])
    ry = np.array([[cy, 0, -sy], [0, 1, 0], [sy, 0, cy]])
    rx = np.array([[cx, -sx, 0], [sx, cx, 0], [0, 0, 1]])
    return rz @ ry @ rx


def apply_augmentation(
    vol: Volume, mask: Mask, spec: AugSpec, seed: int
) -> tuple[Volume, Mask]:
    """Apply one sampled augmentation to a volume and its mask.

    The same geometric transform (rotation+scale about the center, flips,
    crop) is applied to both; intensity-only ops (blur, noise, brightness,
    contrast, gamma) touch only the volume. A fixed seed fixes every sample,
    and identity parameters leave the inputs bit-identical.
    """
    if vol.is_label:
        raise ValueError("augmentation expects an intensity volume")
    if not vol.same_geometry(mask):
        raise ValueError("volume and mask geometry differ")
    rng = np.random.default_rng(seed)
    angles = rng.uniform(spec.rotation_deg[0], spec.rotation_deg[1], size=3)
    scale = float(rng.uniform(spec.scale[0], spec.scale[1]))
    flip_draws = rng.random(3) < 0.5
    flips = tuple(bool(f and e) for f, e in zip(flip_draws, spec.flip_axes))

    vox = vol.voxels
    mvox = mask.voxels
    if any(a != 0.0 for a in angles) or scale != 1.0:
        matrix = _rotation_matrix(angles).T / scale
        center = (np.array(vol.dims, dtype=np.float64) - 1.0) / 2.0
        offset = center - matrix @ center
        vox = ndimage.affine_transform(
            vox.astype(np.float64),
            matrix,
            offset=offset,
            order=1,
            mode="constant",
            cval=INTENSITY_PAD_HU,
        ).astype(np.float32)
        mvox = ndimage.affine_transform(
            mvox, matrix, offset=offset, order=0, mode="constant", cval=LABEL_PAD
        )
    axes = tuple(i for i, f in enumerate(flips) if f)
    if axes:
        vox = np.flip(vox, axis=axes).copy()
        mvox = np.flip(mvox, axis=axes).copy()
    if spec.crop_size is not None:
        starts = tuple(
            int(rng.integers(0, max(1, d - c + 1)))
            for d, c in zip(vox.shape, spec.crop_size)
        )
        sl = tuple(slice(s, s + c) for s, c in zip(starts, spec.crop_size))
        pad_shape = tuple(max(c, d) for c, d in zip(spec.crop_size, vox.shape))
        if pad_shape != vox.shape:
            grown = np.full(pad_shape, INTENSITY_PAD_HU, dtype=vox.dtype)
            grown[tuple(slice(0, d) for d in vox.shape)] = vox
            vox = grown
            grown_m = np.full(pad_shape, LABEL_PAD, dtype=mvox.dtype)
            grown_m[tuple(slice(0, d) for d in mvox.shape)] = mvox
            mvox = grown_m
        vox = vox[sl].copy()
        mvox = mvox[sl].copy()

    if spec.blur_sigma_mm > 0.0:
        sigmas = tuple(spec.blur_sigma_mm / s for s in vol.spacing)
        vox = ndimage.gaussian_filter(vox.astype(np.float64), sigma=sigmas).astype(
            np.float32
        )
    if spec.brightness_hu != (0.0, 0.0):
        shift = float(rng.uniform(*spec.brightness_hu))
        vox = (vox + np.float32(shift)).astype(np.float32)
    if spec.contrast != (1.0, 1.0):
        k = float(rng.uniform(*spec.contrast))
        mean = float(vox.mean())
        vox = ((vox - mean) * np.float32(k) + np.float32(mean)).astype(np.float32)
    if spec.gamma != (1.0, 1.0):
        g = float(rng.uniform(*spec.gamma))
        vmin, vmax = float(vox.min()), float(vox.max())
        if vmax > vmin:
            unit = (vox - vmin) / (vmax - vmin)
            vox = (np.power(unit, g) * (vmax - vmin) + vmin).astype(np.float32)
    if spec.noise_sigma_hu > 0.0:
        noise = rng.normal(0.0, spec.noise_sigma_hu, size=vox.shape)
        vox = (vox + noise).astype(np.float32)

    out_vol = Volume(vox, spacing=vol.spacing, origin=vol.origin)
    out_mask = Mask(mvox, spacing=mask.spacing, origin=mask.origin)
    return out_vol, out_mask


def apply_lobe_mask(
    vol: Volume,
    lobes: LobeLabelMap,
    keep: Iterable[LobeId | int],
    fill: float = INTENSITY_PAD_HU,
) -> Volume:
    """Keep voxels whose lobe label is in `keep`; set everything else to fill."""
    if vol.is_label:
        raise ValueError("apply_lobe_mask expects an intensity volume")
    if not vol.same_geometry(lobes):
        raise ValueError("volume and lobe map geometry differ")
    keep_ids = sorted({int(k) for k in keep})
    if not keep_ids:
        raise ValueError("keep set must be non-empty")
    if any(k < 1 or k > max(LobeId) for k in keep_ids):
        raise ValueError(f"keep set contains non-lobe labels: {keep_ids}")
    inside = np.isin(lobes.voxels, keep_ids)
    out = np.where(inside, vol.voxels, np.float32(fill))
    return Volume(out, spacing=vol.spacing, origin=vol.origin)


def encode_volume(vol: Volume) -> bytes:
    """Serialize a volume to EXNV v1 bytes."""
    if vol.is_label:
        code = _DTYPE_LABEL
        payload = np.ascontiguousarray(vol.voxels, dtype=np.uint8).tobytes()
    else:
        code = _DTYPE_INTENSITY
        payload = np.ascontiguousarray(vol.voxels, dtype="<f4").tobytes()
    header = _HEADER.pack(
        _MAGIC, _VERSION, code, 0, *vol.dims, *vol.spacing, *vol.origin
    )
    return header + payload


def write_volume(vol: Volume, path: str | Path) -> None:
    """Write a volume in EXNV v1."""
    Path(path).write_bytes(encode_volume(vol))


def decode_volume(blob: bytes) -> Volume:
    """Parse EXNV v1 bytes; the dtype code decides intensity vs label."""
    if len(blob) < _HEADER.size:
        raise MalformedHeaderError(f"file shorter than the {_HEADER.size}-byte header")
    magic, version, code, reserved, d0, d1, d2, s0, s1, s2, o0, o1, o2 = _HEADER.unpack(
        blob[: _HEADER.size]
    )
    if magic != _MAGIC:
        raise MalformedHeaderError(f"bad magic {magic!r}")
    if version != _VERSION:
        raise MalformedHeaderError(f"unsupported version {version}")
    if reserved != 0:
        raise MalformedHeaderError("reserved header bytes must be zero")
    if code == _DTYPE_INTENSITY:
        dtype = np.dtype("<f4")
    elif code == _DTYPE_LABEL:
        dtype = np.dtype(np.uint8)
    else:
        raise UnknownDtypeError(f"unknown dtype code {code}")
    dims = (d0, d1, d2)
    expected = d0 * d1 * d2 * dtype.itemsize
    payload = blob[_HEADER.size :]
    if len(payload) != expected:
        raise TruncatedPayloadError(
            f"payload is {len(payload)} bytes, dims {dims} require {expected}"
        )
    voxels = np.frombuffer(payload, dtype=dtype).reshape(dims)
    if code == _DTYPE_INTENSITY:
        voxels = voxels.astype(np.float32)
    else:
        voxels = voxels.copy()
    return Volume(voxels, spacing=(s0, s1, s2), origin=(o0, o1, o2))


def read_volume(path: str | Path) -> Volume:
    """Read an EXNV v1 file."""
    return decode_volume(Path(path).read_bytes())
