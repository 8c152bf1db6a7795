"""Intensity normalization and resampling between subject and normalized grids."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import ndimage

from .core import GridSpec, Mask3D, Volume3D, Volume4D
from .errors import DegenerateInputError, GeometryError

PERCENTILE = 99.9
NORMALIZED_SPACING = (1.0, 1.0, 1.0)
DEFAULT_GRID_DIMS = (256, 256, 256)
_SNAP = 1e-6


@dataclass(frozen=True)
class NormalizationParams:
    p999: float
    floor: float = 0.0


def percentile_rank(n: int, q: float = PERCENTILE) -> int:
    """1-based nearest rank ceil(q/100 * n)."""
    # exact rational arithmetic: 99.9 / 100 * 1000 is 999.0000000000001 in floats
    return max(1, math.ceil(Fraction(str(q)) * n / 100))


def nearest_rank_percentile(values: np.ndarray, q: float = PERCENTILE) -> float:
    """Nearest-rank percentile: the ceil(q/100 * N)-th smallest value."""
    flat = np.asarray(values).reshape(-1)
    if flat.size == 0:
        raise DegenerateInputError("percentile of an empty array")
    rank = percentile_rank(flat.size, q)
    return float(np.partition(flat, rank - 1)[rank - 1])


def _normalize(data: np.ndarray) -> tuple[np.ndarray, NormalizationParams]:
    if not np.any(data > 0):
        raise DegenerateInputError("no positive voxels to normalize")
    p999 = nearest_rank_percentile(data)
    if p999 <= 0:
        raise DegenerateInputError(f"99.9th percentile is {p999}; fewer than 0.1% voxels positive")
    scale = np.float32(p999)
    out = np.clip(data, np.float32(0), scale) / scale
    return out.astype(np.float32), NormalizationParams(float(scale))


def normalize_intensity(study: Volume4D) -> tuple[Volume4D, NormalizationParams]:
    """Clamp to [0, p99.9] and divide by p99.9, one shared scale for all volumes."""
    data, params = _normalize(study.data)
    return study.with_data(data), params


def normalize_t1(t1: Volume3D) -> tuple[Volume3D, NormalizationParams]:
    data, params = _normalize(t1.data)
    return t1.with_data(data), params


def denormalize(data: np.ndarray, params: NormalizationParams) -> np.ndarray:
    return (np.asarray(data, dtype=np.float32) * np.float32(params.p999)).astype(np.float32)


def _source_coords(mapping: np.ndarray, src_dims, target_dims, k0: int, k1: int) -> np.ndarray:
    idx = np.mgrid[0:target_dims[0], 0:target_dims[1], k0:k1].reshape(3, -1).astype(np.float64)
    coords = mapping[:3, :3] @ idx + mapping[:3, 3:4]
    # exact integers keep identity and shift resampling bit-exact
    rounded = np.round(coords)
    near = np.abs(coords - rounded) < _SNAP
    coords[near] = rounded[near]
    # samples within rounding error of the outer voxel centres count as inside
    for axis, n in enumerate(src_dims):
        c = coords[axis]
        c[(c < 0) & (c > -_SNAP)] = 0.0
        c[(c > n - 1) & (c < n - 1 + _SNAP)] = n - 1
    return coords


def resample_array(data: np.ndarray, src_affine: np.ndarray, target: GridSpec,
                   mode: str = "trilinear", chunk_voxels: int = 1 << 21) -> np.ndarray:
    """Sample ``data`` (voxel->world ``src_affine``) at the voxel centres of ``target``.

    Points outside the convex hull of source voxel centres get 0.
    """
    order = {"trilinear": 1, "nearest": 0}[mode]
    try:
        mapping = np.linalg.inv(np.asarray(src_affine, np.float64)) @ target.affine
    except np.linalg.LinAlgError as exc:
        raise GeometryError("source affine is not invertible") from exc
    src = np.asarray(data, dtype=np.float64 if order else data.dtype)
    ni, nj, nk = target.dims
    step = max(1, chunk_voxels // (ni * nj))
    out = np.empty(target.dims, dtype=src.dtype)
    for k0 in range(0, nk, step):
        k1 = min(nk, k0 + step)
        coords = _source_coords(mapping, data.shape, target.dims, k0, k1)
        vals = ndimage.map_coordinates(src, coords, order=order, mode="constant", cval=0.0,
                                       prefilter=False)
        out[:, :, k0:k1] = vals.reshape(ni, nj, k1 - k0)
    return out


def resample(vol: Volume3D | Mask3D, target: GridSpec, mode: str = "trilinear"):
    """Resample a volume (trilinear or nearest) or a mask (always nearest) onto ``target``."""
    if isinstance(vol, Mask3D):
        out = resample_array(vol.data.astype(np.uint8), vol.affine, target, "nearest")
        return Mask3D.on_grid(out.astype(bool), target)
    out = resample_array(vol.data, vol.affine, target, mode)
    return Volume3D.on_grid(out.astype(np.float32), target)


def normalized_grid(study_grid: GridSpec, dims=DEFAULT_GRID_DIMS) -> GridSpec:
    """1 mm grid of ``dims`` voxels, axes aligned with the DWI voxel axes, centred on the DWI."""
    dims = tuple(int(d) for d in dims)
    directions = study_grid.affine[:3, :3] / np.linalg.norm(study_grid.affine[:3, :3], axis=0)
    centre_world = study_grid.affine @ np.append((np.array(study_grid.dims) - 1) / 2.0, 1.0)
    affine = np.eye(4)
    affine[:3, :3] = directions * np.array(NORMALIZED_SPACING)
    affine[:3, 3] = centre_world[:3] - affine[:3, :3] @ ((np.array(dims) - 1) / 2.0)
    return GridSpec(dims, NORMALIZED_SPACING, affine)


def to_normalized_space(study: Volume4D, t1: Volume3D, reg_affine=None,
                        dims=DEFAULT_GRID_DIMS) -> tuple[Volume4D, Volume3D, GridSpec]:
    """Bring a study and its T1 onto the shared 1 mm normalized grid.

    ``reg_affine`` maps T1 world coordinates to DWI world coordinates.
    """
    reg = np.eye(4) if reg_affine is None else np.asarray(reg_affine, dtype=np.float64)
    grid = normalized_grid(study.grid, dims)
    vols = [resample_array(study.data[..., v], study.affine, grid).astype(np.float32)
            for v in range(study.n_volumes)]
    out = Volume4D(np.stack(vols, axis=-1), grid.spacing, grid.affine, study.gradient)
    t1_out = resample_array(t1.data, reg @ t1.affine, grid)
    return out, Volume3D.on_grid(t1_out.astype(np.float32), grid), grid


def from_normalized_space(imputed: Volume3D, subject_grid: GridSpec) -> Volume3D:
    return resample(imputed, subject_grid, "trilinear")


def mask_to_normalized_space(mask: Mask3D, grid: GridSpec, reg_affine=None) -> Mask3D:
    reg = np.eye(4) if reg_affine is None else np.asarray(reg_affine, dtype=np.float64)
    out = resample_array(mask.data.astype(np.uint8), reg @ mask.affine, grid, "nearest")
    return Mask3D.on_grid(out.astype(bool), grid)
