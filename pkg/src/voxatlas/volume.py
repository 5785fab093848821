"""Dense 3D volumes, sampling and the VVOL file format."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

VVOL_MAGIC = b"VVOL"
VVOL_VERSION = 1
_HEADER = struct.Struct("<4sIB3x3I3f")
# refuse headers whose payload would exceed 2**31 scalars
_MAX_SCALARS = 2**31


class Kind(enum.IntEnum):
    INTENSITY = 0
    LABEL = 1


class VolumeFormatError(ValueError):
    """Malformed VVOL file. ``field`` names the offending header field."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class BadMagicError(VolumeFormatError):
    pass


class DimOverflowError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


@dataclass(frozen=True)
class Volume:
    """Immutable 3D scalar grid indexed ``data[i, j, k]`` with i along x.

    Serialized order is x-fastest (``i + nx*(j + ny*k)``).
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    kind: Kind = Kind.INTENSITY
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be three positive reals, got {self.spacing}")
        kind = Kind(self.kind)
        if kind is Kind.LABEL and not np.all((data == 0) | (data == 1)):
            raise ValueError("label volumes may only contain 0 and 1")
        data = np.array(data, copy=True)
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "kind", kind)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    def with_data(self, data, kind: Kind | None = None) -> "Volume":
        return Volume(data, self.spacing, self.kind if kind is None else kind)

    @classmethod
    def label(cls, mask, spacing=(1.0, 1.0, 1.0)) -> "Volume":
        return cls(np.asarray(mask, dtype=np.float64) > 0.5, spacing, Kind.LABEL)


def _clamp_index(v: float, n: int) -> float:
    return min(max(v, 0.0), float(n - 1))


def sample_trilinear(vol: Volume, p) -> float:
    """Trilinear interpolant at continuous voxel coordinate ``p``; clamps to the border."""
    if vol.kind is not Kind.INTENSITY:
        raise ValueError("sample_trilinear expects an intensity volume; use sample_nearest for labels")
    idx = []
    for axis, n in enumerate(vol.dims):
        c = _clamp_index(float(p[axis]), n)
        i0 = min(int(np.floor(c)), max(n - 2, 0))
        idx.append((i0, min(i0 + 1, n - 1), c - i0))
    (x0, x1, fx), (y0, y1, fy), (z0, z1, fz) = idx
    d = vol.data
    c00 = d[x0, y0, z0] * (1 - fx) + d[x1, y0, z0] * fx
    c10 = d[x0, y1, z0] * (1 - fx) + d[x1, y1, z0] * fx
    c01 = d[x0, y0, z1] * (1 - fx) + d[x1, y0, z1] * fx
    c11 = d[x0, y1, z1] * (1 - fx) + d[x1, y1, z1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return float(c0 * (1 - fz) + c1 * fz)


def round_half_away(v):
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def sample_nearest(vol: Volume, p) -> float:
    """Value at the nearest voxel; ties round away from zero, then clamp."""
    ijk = tuple(
        int(min(max(round_half_away(float(p[a])), 0), n - 1)) for a, n in enumerate(vol.dims)
    )
    return float(vol.data[ijk])


def normalize(vol: Volume) -> Volume:
    """Rescale intensities to [0, 1]. A constant volume maps to all zeros."""
    if vol.kind is not Kind.INTENSITY:
        raise ValueError("normalize expects an intensity volume")
    d = np.asarray(vol.data, dtype=np.float64)
    lo, hi = d.min(), d.max()
    if hi == lo:
        return vol.with_data(np.zeros_like(d))
    if lo == 0.0 and hi == 1.0:
        return vol
    return vol.with_data((d - lo) / (hi - lo))


def write_vvol(path, vol: Volume) -> None:
    nx, ny, nz = vol.dims
    header = _HEADER.pack(VVOL_MAGIC, VVOL_VERSION, int(vol.kind), nx, ny, nz, *vol.spacing)
    payload = np.asarray(vol.data, dtype="<f4").ravel(order="F").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_vvol(path) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != VVOL_MAGIC:
        raise BadMagicError("magic", f"expected {VVOL_MAGIC!r}, found {raw[:4]!r}")
    if len(raw) < _HEADER.size:
        raise TruncatedPayloadError("header", f"file has {len(raw)} bytes, header needs {_HEADER.size}")
    _, version, kind, nx, ny, nz, sx, sy, sz = _HEADER.unpack_from(raw)
    if version != VVOL_VERSION:
        raise VolumeFormatError("version", f"unsupported version {version}")
    if kind not in (0, 1):
        raise VolumeFormatError("kind", f"unknown kind code {kind}")
    for name, n in (("nx", nx), ("ny", ny), ("nz", nz)):
        if n == 0:
            raise DimOverflowError(name, "dimension must be positive")
    count = nx * ny * nz
    if count >= _MAX_SCALARS:
        raise DimOverflowError("nx*ny*nz", f"{count} scalars exceeds the format limit")
    have = (len(raw) - _HEADER.size) // 4
    if have < count or (len(raw) - _HEADER.size) % 4:
        raise TruncatedPayloadError("payload", f"header declares {count} scalars, file holds {have}")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=_HEADER.size)
    data = data.reshape((nx, ny, nz), order="F").astype(np.float32)
    return Volume(data, (sx, sy, sz), Kind(kind))
