"""Atlas deformation layer: a 12-parameter affine map followed by a cubic B-spline FFD.

Parameters live in one flat vector ``[theta(12) | phi(3 * gx * gy * gz)]``. ``theta``
holds the 3x3 matrix row-major then the translation. Everything is in voxel
units and the deformation maps *output* voxels into atlas space (backward
warping), so ``warp`` is a resampling of the atlas.

The control lattice spans the output volume with one cell of margin on each
side: control point ``k`` sits at voxel coordinate ``(k - 1) * delta`` with
``delta = (n - 1) / (g - 3)``, which gives every voxel a full 4x4x4 support.
Points mapped beyond the lattice see zero displacement from the missing taps
rather than an extrapolated cubic.

``warp_array`` and ``warp_vjp`` also accept a (C, X, Y, Z) stack, warped with
one shared deformation (label and intensity atlases go through together).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _backend, _warp_py
from .volume import Kind, Volume

_core = _backend.core
BACKEND = _backend.NAME

DEFAULT_GRID = (10, 10, 10)
N_AFFINE = 12
VPAR_MAGIC = b"VPAR"
VPAR_VERSION = 1
_VPAR_HEADER = struct.Struct("<4sI3I")

bspline_weights = _warp_py.bspline_weights


def identity_affine() -> np.ndarray:
    theta = np.zeros(N_AFFINE)
    theta[[0, 4, 8]] = 1.0
    return theta


def affine_apply(theta, p) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    return theta[:9].reshape(3, 3) @ np.asarray(p, dtype=np.float64) + theta[9:12]


def cubic_bspline_basis(u: float) -> np.ndarray:
    """The four blending weights B0..B3 at ``u`` in [0, 1)."""
    w, _ = bspline_weights(np.asarray([u], dtype=np.float64))
    return w[0]


@dataclass
class ParamVector:
    """Affine + FFD parameters for one deformation."""

    values: np.ndarray
    grid_dims: tuple[int, int, int] = DEFAULT_GRID

    def __post_init__(self):
        self.grid_dims = tuple(int(g) for g in self.grid_dims)
        if min(self.grid_dims) < 4:
            raise ValueError(f"control grid needs at least 4 points per axis, got {self.grid_dims}")
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.values.size != param_count(self.grid_dims):
            raise ValueError(
                f"expected {param_count(self.grid_dims)} parameters for grid {self.grid_dims}, "
                f"got {self.values.size}"
            )

    @classmethod
    def identity(cls, grid_dims=DEFAULT_GRID) -> "ParamVector":
        values = np.zeros(param_count(grid_dims))
        values[:N_AFFINE] = identity_affine()
        return cls(values, grid_dims)

    @property
    def theta(self) -> np.ndarray:
        return self.values[:N_AFFINE]

    @property
    def phi(self) -> np.ndarray:
        """Control-point displacements, shape ``(gx, gy, gz, 3)``."""
        return self.values[N_AFFINE:].reshape(self.grid_dims + (3,))

    def __len__(self) -> int:
        return self.values.size

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.grid_dims)


def param_count(grid_dims=DEFAULT_GRID) -> int:
    return N_AFFINE + 3 * int(np.prod(grid_dims))


def ffd_displacement(phi, p, target_dims) -> np.ndarray:
    """FFD displacement at a single point for a lattice built over ``target_dims``."""
    phi = np.asarray(phi, dtype=np.float64)
    disp, _ = _warp_py.ffd_eval(np.asarray(p, dtype=np.float64).reshape(1, 3), phi, target_dims)
    return disp[0]


def compose_apply(params: ParamVector, p, target_dims) -> np.ndarray:
    q = affine_apply(params.theta, p)
    return q + ffd_displacement(params.phi, q, target_dims)


def map_points(params: ParamVector, points, target_dims) -> np.ndarray:
    """Vectorised ``compose_apply`` over an (N, 3) array of points."""
    return _warp_py.map_points(points, params.theta, params.phi, target_dims)


def _sampling_array(vol: Volume | np.ndarray) -> np.ndarray:
    data = vol.data if isinstance(vol, Volume) else vol
    return np.ascontiguousarray(data, dtype=np.float64)


def warp(params: ParamVector, atlas_vol: Volume, target_dims=None, mode: str | None = None) -> Volume:
    """Resample ``atlas_vol`` through the deformation onto a ``target_dims`` grid.

    ``mode`` defaults to trilinear for intensity volumes and nearest for labels.
    """
    target_dims = atlas_vol.dims if target_dims is None else tuple(int(n) for n in target_dims)
    if mode is None:
        mode = "nearest" if atlas_vol.kind is Kind.LABEL else "linear"
    if mode not in ("linear", "nearest"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    out = _core.warp_forward(
        _sampling_array(atlas_vol), params.theta, params.phi, target_dims, mode == "nearest"
    )
    return Volume(out, atlas_vol.spacing, atlas_vol.kind)


def warp_array(params: ParamVector, atlas: np.ndarray, target_dims, nearest=False) -> np.ndarray:
    return _core.warp_forward(_sampling_array(atlas), params.theta, params.phi, target_dims, nearest)


def warp_vjp(params: ParamVector, atlas_vol, upstream) -> np.ndarray:
    """Gradient of ``sum(upstream * warp(params, atlas_vol))`` with respect to ``params``."""
    if isinstance(atlas_vol, Volume) and atlas_vol.kind is Kind.LABEL:
        raise ValueError("nearest-neighbour label warping is not differentiable; warp a soft label")
    upstream = np.asarray(upstream.data if isinstance(upstream, Volume) else upstream, np.float64)
    dtheta, dphi = _core.warp_vjp(
        _sampling_array(atlas_vol), params.theta, params.phi, upstream.shape[-3:], upstream
    )
    return np.concatenate([dtheta, dphi.reshape(-1)])


def write_params(path, params: ParamVector) -> None:
    with open(path, "wb") as fh:
        fh.write(_VPAR_HEADER.pack(VPAR_MAGIC, VPAR_VERSION, *params.grid_dims))
        fh.write(params.values.astype("<f4").tobytes())


def read_params(path) -> ParamVector:
    raw = Path(path).read_bytes()
    if raw[:4] != VPAR_MAGIC:
        raise ValueError(f"magic: expected {VPAR_MAGIC!r}, found {raw[:4]!r}")
    _, version, gx, gy, gz = _VPAR_HEADER.unpack_from(raw)
    if version != VPAR_VERSION:
        raise ValueError(f"version: unsupported {version}")
    n = param_count((gx, gy, gz))
    if len(raw) - _VPAR_HEADER.size != 4 * n:
        raise ValueError(f"payload: expected {n} scalars, found {(len(raw) - _VPAR_HEADER.size) // 4}")
    values = np.frombuffer(raw, dtype="<f4", offset=_VPAR_HEADER.size).astype(np.float64)
    return ParamVector(values, (gx, gy, gz))
