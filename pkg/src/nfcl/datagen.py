"""Volumes, coordinate grids, and the synthetic beating-heart phantom.

Grids map every axis linearly onto [-1, 1] with inclusive endpoints, in
C order, so a flattened volume and its coordinate matrix line up row for
row.  The phantom is a deterministic stand-in for cardiac cine MRI: two
blood pools (high intensity) and a myocardial shell that contract with a
time parameter, plus a high-frequency texture term that exercises the
spectral bias of coordinate networks.  Volumes round-trip bit-exactly
through the NFV binary container.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ContractError, DegenerateInputError, FormatError


class VolumeKind(Enum):
    INTENSITY = 0
    LABELS = 1


# label convention: 0 background, 1 right ventricle, 2 myocardium, 3 left ventricle
LABEL_NAMES = {0: "background", 1: "rv", 2: "myocardium", 3: "lv"}


@dataclass
class Volume:
    """Dense grid signal: float intensities in [0, 1] or integer labels 0..3."""

    dims: tuple[int, int, int]
    kind: VolumeKind
    data: np.ndarray
    channels: int = 1

    def __post_init__(self):
        expected = self.dims if self.channels == 1 else self.dims + (self.channels,)
        if tuple(self.data.shape) != tuple(expected):
            raise ContractError(
                f"volume data shape {self.data.shape} does not match dims {expected}"
            )

    def flat(self) -> np.ndarray:
        """(n_voxels, channels) view in C order, matching make_grid rows."""
        return self.data.reshape(-1, self.channels)


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned evenly spaced grid over [-1, 1]^3, optionally at a fixed time."""

    nx: int
    ny: int
    nz: int
    t: float | None = None

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def n_points(self) -> int:
        return self.nx * self.ny * self.nz


def axis_coords(n: int) -> np.ndarray:
    if n < 2:
        raise ContractError(f"grid axes need at least 2 points, got {n}")
    return np.linspace(-1.0, 1.0, n)


def make_grid(spec: GridSpec) -> np.ndarray:
    """One row per voxel, C-order (z fastest), time column appended if set."""
    xs = axis_coords(spec.nx)
    ys = axis_coords(spec.ny)
    zs = axis_coords(spec.nz)
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    cols = [gx.reshape(-1), gy.reshape(-1), gz.reshape(-1)]
    if spec.t is not None:
        cols.append(np.full(spec.n_points, float(spec.t)))
    return np.stack(cols, axis=1)


def normalize_intensity(v: Volume) -> Volume:
    """Rescale one intensity volume to [0, 1] by its own min/max."""
    if v.kind is not VolumeKind.INTENSITY:
        raise ContractError("normalize_intensity expects an intensity volume")
    lo = float(v.data.min())
    hi = float(v.data.max())
    if hi <= lo:
        raise DegenerateInputError(f"constant volume (min == max == {lo}) cannot be normalized")
    data = ((v.data - lo) / (hi - lo)).astype(np.float32)
    return Volume(v.dims, VolumeKind.INTENSITY, data, v.channels)


def normalize_case(frames: list[Volume]) -> list[Volume]:
    """Rescale a whole 3D+t sequence with one shared min/max (per-case normalization)."""
    if not frames:
        raise ContractError("normalize_case needs at least one frame")
    lo = min(float(f.data.min()) for f in frames)
    hi = max(float(f.data.max()) for f in frames)
    if hi <= lo:
        raise DegenerateInputError("constant sequence cannot be normalized")
    out = []
    for f in frames:
        if f.kind is not VolumeKind.INTENSITY:
            raise ContractError("normalize_case expects intensity volumes")
        data = ((f.data - lo) / (hi - lo)).astype(np.float32)
        out.append(Volume(f.dims, VolumeKind.INTENSITY, data, f.channels))
    return out


def contraction(t: float) -> float:
    """In-plane scale factor of the heart at time t in [-1, 1].

    Monotone from 1.0 (t = -1, fully relaxed) to 0.7 (t = +1, fully
    contracted), so every frame of a sequence differs from the others.
    """
    return 0.85 + 0.15 * float(np.cos(np.pi * (t + 1.0) / 2.0))


def _ellipsoid(gx, gy, gz, center, radii) -> np.ndarray:
    cx, cy, cz = center
    rx, ry, rz = radii
    return ((gx - cx) / rx) ** 2 + ((gy - cy) / ry) ** 2 + ((gz - cz) / rz) ** 2 <= 1.0


def phantom(
    nx: int,
    ny: int,
    nz: int,
    t: float,
    case_seed: int,
    jitter: float = 0.05,
) -> tuple[Volume, Volume]:
    """Beating-ellipsoid intensity volume with an aligned label mask.

    Geometry at normalized coordinates, with s = contraction(t): the left
    ventricular pool is an ellipsoid at (-0.2, 0, 0) with radii
    (0.30 s, 0.30 s, 0.45); the myocardium is the shell out to those radii
    times 1.4; the right ventricular pool sits at (0.35, 0, 0) with radii
    (0.25 s, 0.35 s, 0.40), minus anything already claimed.  Intensities:
    0.2 + 0.1 x background, 0.5 myocardium, 0.8 blood pools, plus a
    0.05 sin(4πx) sin(4πy) texture everywhere, clamped to [0, 1].  The
    case seed jitters both pool centers by U(-jitter, jitter) per axis;
    pass jitter=0.0 for the canonical geometry.
    """
    rng = np.random.default_rng(case_seed)
    jit_lv = rng.uniform(-jitter, jitter, 3) if jitter > 0 else np.zeros(3)
    jit_rv = rng.uniform(-jitter, jitter, 3) if jitter > 0 else np.zeros(3)

    xs = axis_coords(nx)[:, None, None]
    ys = axis_coords(ny)[None, :, None]
    zs = axis_coords(nz)[None, None, :]
    gx, gy, gz = np.broadcast_arrays(xs, ys, zs)

    s = contraction(t)
    lv_center = np.array([-0.2, 0.0, 0.0]) + jit_lv
    rv_center = np.array([0.35, 0.0, 0.0]) + jit_rv
    lv_radii = (0.30 * s, 0.30 * s, 0.45)
    myo_radii = (0.30 * s * 1.4, 0.30 * s * 1.4, 0.45 * 1.4)
    rv_radii = (0.25 * s, 0.35 * s, 0.40)

    in_lv = _ellipsoid(gx, gy, gz, lv_center, lv_radii)
    in_myo = _ellipsoid(gx, gy, gz, lv_center, myo_radii) & ~in_lv
    in_rv = _ellipsoid(gx, gy, gz, rv_center, rv_radii) & ~in_lv & ~in_myo

    labels = np.zeros((nx, ny, nz), dtype=np.uint8)
    labels[in_rv] = 1
    labels[in_myo] = 2
    labels[in_lv] = 3

    intensity = 0.2 + 0.1 * gx
    intensity = np.where(in_myo, 0.5, intensity)
    intensity = np.where(in_lv | in_rv, 0.8, intensity)
    intensity = intensity + 0.05 * np.sin(4.0 * np.pi * gx) * np.sin(4.0 * np.pi * gy)
    intensity = np.clip(intensity, 0.0, 1.0).astype(np.float32)

    return (
        Volume((nx, ny, nz), VolumeKind.INTENSITY, intensity),
        Volume((nx, ny, nz), VolumeKind.LABELS, labels),
    )


# ---------------------------------------------------------------------------
# NFV binary container
#
#   magic   7 bytes  "NFVOL1\0"
#   kind    u8       0 intensity / 1 labels
#   ndim    u8
#   extents u32 LE   one per dim
#   chans   u32 LE
#   payload C-order  f32 LE (intensity) or u8 (labels)

NFV_MAGIC = b"NFVOL1\x00"


def save_volume(v: Volume, path) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(NFV_MAGIC)
        f.write(struct.pack("<BB", v.kind.value, len(v.dims)))
        for extent in v.dims:
            f.write(struct.pack("<I", extent))
        f.write(struct.pack("<I", v.channels))
        if v.kind is VolumeKind.INTENSITY:
            payload = np.ascontiguousarray(v.data, dtype="<f4")
        else:
            payload = np.ascontiguousarray(v.data, dtype=np.uint8)
        f.write(payload.tobytes())


def load_volume(path) -> Volume:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < len(NFV_MAGIC) or blob[: len(NFV_MAGIC)] != NFV_MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0 (expected {NFV_MAGIC!r})")
    off = len(NFV_MAGIC)
    if len(blob) < off + 2:
        raise FormatError(f"{path}: truncated header at byte {off}")
    kind_byte, ndim = struct.unpack_from("<BB", blob, off)
    off += 2
    if kind_byte not in (0, 1):
        raise FormatError(f"{path}: unknown volume kind {kind_byte} at byte {off - 2}")
    if len(blob) < off + 4 * ndim + 4:
        raise FormatError(f"{path}: truncated header at byte {off}")
    dims = struct.unpack_from(f"<{ndim}I", blob, off)
    off += 4 * ndim
    (channels,) = struct.unpack_from("<I", blob, off)
    off += 4

    n_values = int(np.prod(dims)) * channels
    itemsize = 4 if kind_byte == 0 else 1
    expected = n_values * itemsize
    actual = len(blob) - off
    if actual != expected:
        raise FormatError(
            f"{path}: payload at byte {off} has {actual} bytes, expected {expected}"
        )
    dtype = "<f4" if kind_byte == 0 else np.uint8
    data = np.frombuffer(blob, dtype=dtype, count=n_values, offset=off)
    shape = tuple(dims) if channels == 1 else tuple(dims) + (channels,)
    data = data.reshape(shape).copy()
    if kind_byte == 0:
        data = data.astype(np.float32)
    return Volume(tuple(dims), VolumeKind(kind_byte), data, channels)
