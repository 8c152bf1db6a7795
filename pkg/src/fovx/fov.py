"""Incomplete-FOV simulation, acquired-slice detection and missing-thickness QA.

Cuts are zero-fills along the inferior-superior axis (axis 2) so every
array keeps its shape.  ``top`` is the high-``k`` end of the grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import CUT_AXIS, Mask3D, Volume4D, require_same_grid
from .errors import ValidationError

SIDES = ("top", "bottom")
TRAIN_CUT_RANGE_MM = (0.0, 50.0)


@dataclass(frozen=True)
class FovCut:
    side: str
    extent_mm: float
    slice_range: tuple[int, int]

    def __post_init__(self):
        if self.side not in ("top", "bottom", "none"):
            raise ValidationError(f"unknown cut side {self.side!r}")
        start, stop = self.slice_range
        if stop < start:
            raise ValidationError(f"bad slice range {self.slice_range}")
        if self.side == "none" and stop != start:
            raise ValidationError("side 'none' requires an empty slice range")

    @property
    def n_slices(self) -> int:
        return self.slice_range[1] - self.slice_range[0]

    @property
    def slices(self) -> range:
        return range(*self.slice_range)


def _cut_range(n_total: int, n_cut: int, side: str) -> tuple[int, int]:
    if n_cut == 0:
        return (0, 0)
    return (n_total - n_cut, n_total) if side == "top" else (0, n_cut)


def slice_mask(grid, slice_range: tuple[int, int]) -> Mask3D:
    """Acquired mask that is 0 exactly on ``slice_range`` along the cut axis."""
    data = np.ones(grid.dims, dtype=bool)
    data[:, :, slice_range[0]:slice_range[1]] = False
    return Mask3D.on_grid(data, grid)


def apply_mask(study: Volume4D, mask: Mask3D) -> Volume4D:
    require_same_grid(study, mask)
    return study.with_data(np.where(mask.data[..., None], study.data, np.float32(0)))


def simulate_cutoff(study: Volume4D, extent_mm: float, side: str) -> tuple[Volume4D, FovCut, Mask3D]:
    """Zero ``extent_mm`` (rounded to whole slices) from the ``side`` edge of the grid."""
    if side not in SIDES:
        raise ValidationError(f"side must be one of {SIDES}, got {side!r}")
    if not np.isfinite(extent_mm) or extent_mm < 0:
        raise ValidationError(f"cut extent must be >= 0 mm, got {extent_mm}")
    dz = study.spacing[CUT_AXIS]
    n_total = study.dims[CUT_AXIS]
    n_cut = int(np.floor(extent_mm / dz + 0.5))
    if n_cut > n_total:
        raise ValidationError(
            f"cut of {extent_mm} mm exceeds the {n_total * dz} mm grid extent")
    rng = _cut_range(n_total, n_cut, side)
    cut = FovCut(side if n_cut else "none", n_cut * dz, rng)
    mask = slice_mask(study.grid, rng)
    return apply_mask(study, mask), cut, mask


def brain_extent(brain: Mask3D) -> tuple[int, int] | None:
    """Inclusive (lowest, highest) slice index along the cut axis holding brain."""
    ks = np.flatnonzero(brain.data.any(axis=(0, 1)))
    if ks.size == 0:
        return None
    return int(ks[0]), int(ks[-1])


def cut_from_brain(study: Volume4D, brain: Mask3D, depth_mm: float,
                   side: str) -> tuple[Volume4D, FovCut, Mask3D]:
    """Cut so that ``depth_mm`` of brain is removed from its ``side`` extremity.

    The slices between the grid edge and the brain extremity go too; the
    returned :class:`FovCut` describes the whole zeroed range.  Depths beyond
    the grid are clipped to the grid.
    """
    require_same_grid(study, brain)
    if side not in SIDES:
        raise ValidationError(f"side must be one of {SIDES}, got {side!r}")
    extent = brain_extent(brain)
    dz = study.spacing[CUT_AXIS]
    n_total = study.dims[CUT_AXIS]
    n_depth = int(np.floor(depth_mm / dz + 0.5))
    if extent is None or n_depth == 0:
        return simulate_cutoff(study, 0.0, side)
    gap = n_total - 1 - extent[1] if side == "top" else extent[0]
    n_cut = min(n_total, gap + n_depth)
    return simulate_cutoff(study, n_cut * dz, side)


def draw_training_cut(rng: np.random.Generator,
                      cut_range_mm: tuple[float, float] = TRAIN_CUT_RANGE_MM) -> tuple[float, str]:
    lo, hi = cut_range_mm
    extent = float(rng.uniform(lo, hi))
    side = SIDES[int(rng.integers(2))]
    return extent, side


def otsu_threshold(values) -> float:
    """Exact Otsu split of a small sample: maximize between-class variance.

    Returns the largest value of the lower class; constant input returns that constant.
    """
    vals = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    if vals.size == 0:
        raise ValidationError("Otsu threshold of an empty sample")
    uniq = np.unique(vals)
    if uniq.size == 1:
        return float(uniq[0])
    total = vals.sum()
    best, best_t = -1.0, float(uniq[0])
    for t in uniq[:-1]:
        lower = vals[vals <= t]
        w0 = lower.size / vals.size
        mu0 = lower.mean()
        mu1 = (total - lower.sum()) / (vals.size - lower.size)
        score = w0 * (1 - w0) * (mu0 - mu1) ** 2
        if score > best:
            best, best_t = score, float(t)
    return best_t


def compute_acquired_mask(study: Volume4D, empty_tol: float = 1e-6) -> Mask3D:
    """Slice-constant acquired-region mask m (1 acquired, 0 outside the FOV).

    The mean b0 image (all volumes when no table is attached) is 3x3x3
    median filtered and reduced to one mean per axial slice.  A slice is
    outside the FOV when its mean is at or below the Otsu split of the
    slice means, is effectively empty (<= ``empty_tol``), and it belongs to
    an unbroken run that reaches the top or bottom edge of the grid.
    """
    data = study.data
    if study.gradient is not None and study.gradient.b0_mask.any():
        ref = data[..., study.gradient.b0_mask].mean(axis=-1)
    else:
        ref = data.mean(axis=-1)
    filtered = ndimage.median_filter(ref, size=3, mode="nearest")
    means = filtered.mean(axis=(0, 1))
    thresh = min(otsu_threshold(means), empty_tol)
    low = means <= thresh
    n = means.size
    missing = np.zeros(n, dtype=bool)
    k = n - 1
    while k >= 0 and low[k]:
        missing[k] = True
        k -= 1
    k = 0
    while k < n and low[k]:
        missing[k] = True
        k += 1
    mask = np.broadcast_to(~missing, study.dims).copy()
    return Mask3D.on_grid(mask, study.grid)


def estimate_cutoff(acquired: Mask3D, brain: Mask3D) -> tuple[float, float]:
    """(top_mm, bottom_mm) of brain lying beyond the acquired slices."""
    require_same_grid(acquired, brain)
    dz = brain.spacing[CUT_AXIS]
    extent = brain_extent(brain)
    if extent is None:
        return 0.0, 0.0
    kb_lo, kb_hi = extent
    ka = np.flatnonzero(acquired.data.any(axis=(0, 1)))
    if ka.size == 0:
        return (kb_hi - kb_lo + 1) * dz, 0.0
    top = max(0, kb_hi - int(ka[-1])) * dz
    bottom = max(0, int(ka[0]) - kb_lo) * dz
    return float(top), float(bottom)


def estimate_cutoff_thickness(acquired: Mask3D, brain: Mask3D) -> float:
    top, bottom = estimate_cutoff(acquired, brain)
    return top + bottom


def cutoff_side(top_mm: float, bottom_mm: float) -> str:
    if top_mm > 0 and bottom_mm > 0:
        return "both"
    if top_mm > 0:
        return "top"
    if bottom_mm > 0:
        return "bottom"
    return "none"
