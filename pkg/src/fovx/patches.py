"""2.5D slab extraction, per-plane reassembly, plane fusion and compositing.

A slab for slice ``c`` stacks DWI slices ``c-n .. c+n`` followed by the T1
slices at the same positions, ``2(2n+1)`` channels in total.  Indices past
the volume edge are clamped (replicate padding).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import GridSpec, Mask3D, Plane, Volume3D, require_same_grid
from .errors import CompletenessError, ValidationError


@dataclass(frozen=True, eq=False)
class SlabPatch:
    channels: np.ndarray
    plane: Plane
    center_index: int
    n: int

    @property
    def n_channels(self) -> int:
        return self.channels.shape[0]


@dataclass(frozen=True, eq=False)
class PlanePrediction:
    plane: Plane
    slices: np.ndarray  # (N, H, W), one per index along the plane axis


def neighbor_indices(center: int, n: int, size: int) -> np.ndarray:
    return np.clip(np.arange(center - n, center + n + 1), 0, size - 1)


def as_slices(arr: np.ndarray, plane: Plane) -> np.ndarray:
    """View a 3-D array as a stack of 2-D slices along ``plane``'s axis."""
    return np.moveaxis(arr, plane.axis, 0)


def slab_batch(dwi: np.ndarray, t1: np.ndarray, plane: Plane, centers, n: int) -> np.ndarray:
    """Stack slabs for several centre indices: ``(B, 2(2n+1), H, W)`` float32."""
    if dwi.shape != t1.shape:
        raise ValidationError(f"DWI {dwi.shape} and T1 {t1.shape} differ in shape")
    if n < 1:
        raise ValidationError(f"slab half-width n must be >= 1, got {n}")
    size = dwi.shape[plane.axis]
    centers = np.atleast_1d(np.asarray(centers, dtype=int))
    if centers.size and (centers.min() < 0 or centers.max() >= size):
        raise ValidationError(f"centre index out of range [0, {size})")
    idx = np.clip(centers[:, None] + np.arange(-n, n + 1)[None, :], 0, size - 1)
    d = as_slices(dwi, plane)[idx]
    t = as_slices(t1, plane)[idx]
    return np.concatenate([d, t], axis=1).astype(np.float32, copy=False)


def extract_slab(dwi_vol: Volume3D, t1: Volume3D, plane: Plane, center_index: int,
                 n: int) -> SlabPatch:
    require_same_grid(dwi_vol, t1)
    channels = slab_batch(dwi_vol.data, t1.data, plane, [center_index], n)[0]
    return SlabPatch(channels, plane, int(center_index), int(n))


def assemble_plane(predicted_slices: Sequence[np.ndarray] | Mapping[int, np.ndarray],
                   plane: Plane, grid: GridSpec) -> Volume3D:
    """Stack one predicted slice per index along ``plane``'s axis onto ``grid``."""
    size = grid.dims[plane.axis]
    if isinstance(predicted_slices, Mapping):
        missing = [i for i in range(size) if i not in predicted_slices]
        if missing:
            raise CompletenessError(f"no prediction for {plane.value} slices {missing}")
        stack = np.stack([np.asarray(predicted_slices[i]) for i in range(size)])
    else:
        stack = np.asarray(predicted_slices)
        if stack.shape[0] != size:
            raise CompletenessError(
                f"{stack.shape[0]} {plane.value} slices given, grid needs {size}")
    vol = np.moveaxis(stack, 0, plane.axis)
    if vol.shape != grid.dims:
        raise ValidationError(f"assembled shape {vol.shape} does not match grid {grid.dims}")
    return Volume3D.on_grid(vol.astype(np.float32, copy=False), grid)


def fuse_planes(sag: Volume3D, cor: Volume3D) -> Volume3D:
    grid = require_same_grid(sag, cor)
    return Volume3D.on_grid((sag.data + cor.data) * np.float32(0.5), grid)


def composite_output(x_v: Volume3D, y_hat: Volume3D, m: Mask3D) -> Volume3D:
    """m * x_v + (1 - m) * y_hat, taking acquired voxels verbatim from ``x_v``."""
    grid = require_same_grid(x_v, y_hat, m)
    data = np.where(m.data, x_v.data, y_hat.data)
    return Volume3D.on_grid(data, grid)
