"""Evaluation metrics and statistics for imputed DWI.

Image metrics work on normalized intensities (peak 1.0 unless ``data_range``
says otherwise) and are restricted to a region mask.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage, special

from .core import CUT_AXIS, Volume3D, Volume4D
from .errors import ValidationError
from .fov import FovCut

SATURATED = float("inf")


def _arr(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x))


def _region(region, shape) -> np.ndarray:
    if region is None:
        return np.ones(shape, dtype=bool)
    r = _arr(region).astype(bool)
    if r.shape != shape:
        raise ValidationError(f"region shape {r.shape} does not match images {shape}")
    return r


def _pair(ref, test) -> tuple[np.ndarray, np.ndarray]:
    a = _arr(ref).astype(np.float64)
    b = _arr(test).astype(np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(ref, test, region=None, data_range: float = 1.0) -> float:
    """10 log10(MAX^2 / MSE) over ``region``; identical images give ``inf``."""
    a, b = _pair(ref, test)
    r = _region(region, a.shape)
    if not r.any():
        raise ValidationError("PSNR region is empty")
    mse = np.mean((a[r] - b[r]) ** 2)
    if mse == 0:
        return SATURATED
    return float(10.0 * np.log10(data_range ** 2 / mse))


def ssim_map(ref, test, window: int = 7, K1: float = 0.01, K2: float = 0.03,
             data_range: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Local SSIM with a uniform ``window``^3 box and population statistics.

    Returns ``(values, valid)``; only centres whose whole window lies inside
    the volume are valid.
    """
    if window < 1 or window % 2 == 0:
        raise ValidationError(f"SSIM window must be odd, got {window}")
    a, b = _pair(ref, test)
    if a.ndim != 3:
        raise ValidationError("ssim3d needs 3-D images")
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2

    def box(x):
        return ndimage.uniform_filter(x, size=window, mode="constant")

    mu_a, mu_b = box(a), box(b)
    var_a = box(a * a) - mu_a ** 2
    var_b = box(b * b) - mu_b ** 2
    cov = box(a * b) - mu_a * mu_b
    values = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    h = window // 2
    valid = np.zeros(a.shape, dtype=bool)
    valid[tuple(slice(h, n - h) for n in a.shape)] = True
    return values, valid


def ssim3d(ref, test, region=None, window: int = 7, K1: float = 0.01, K2: float = 0.03,
           data_range: float = 1.0) -> float:
    """Mean local SSIM over window centres that lie in ``region``."""
    values, valid = ssim_map(ref, test, window, K1, K2, data_range)
    centres = valid & _region(region, values.shape)
    if not centres.any():
        raise ValidationError("no SSIM window centre lies inside the region")
    return float(np.clip(values[centres].mean(), -1.0, 1.0))


def dice(a, b) -> float:
    """2|A & B| / (|A| + |B|), defined as 1.0 when both masks are empty."""
    x, y = _arr(a).astype(bool), _arr(b).astype(bool)
    if x.shape != y.shape:
        raise ValidationError(f"mask shapes differ: {x.shape} vs {y.shape}")
    total = int(x.sum()) + int(y.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((x & y).sum()) / total


def split_region_dice(ref_mask, test_mask, acquired) -> tuple[float, float]:
    """Dice restricted to acquired (m=1) and to imputed (m=0) voxels."""
    r, t = _arr(ref_mask).astype(bool), _arr(test_mask).astype(bool)
    m = _arr(acquired).astype(bool)
    return dice(r & m, t & m), dice(r & ~m, t & ~m)


def adc_map(study: Volume4D, direction_index: int, brain=None, eps: float = 1e-6) -> Volume3D:
    """ADC = -ln(S / mean b0) / b for one diffusion-weighted volume (mm^2/s).

    Voxels outside ``brain`` (default: mean b0 > eps) are 0.
    """
    if study.gradient is None:
        raise ValidationError("ADC needs a gradient table")
    b0 = study.gradient.b0_mask
    if not b0.any():
        raise ValidationError("ADC needs at least one b0 volume")
    b = float(study.gradient.bvals[direction_index])
    if b <= study.gradient.b0_threshold:
        raise ValidationError(f"volume {direction_index} is a b0 volume")
    s0 = study.data[..., b0].astype(np.float64).mean(axis=-1)
    s = study.data[..., direction_index].astype(np.float64)
    mask = s0 > eps if brain is None else _arr(brain).astype(bool)
    adc = -np.log(np.maximum(s, eps) / np.maximum(s0, eps)) / b
    return Volume3D(np.where(mask, adc, 0.0).astype(np.float32), study.spacing, study.affine)


class CurvePoint(NamedTuple):
    distance_mm: float
    psnr: float
    ssim: float


def per_distance_curve(ref, test, cut: FovCut, region, window: int = 7,
                       data_range: float = 1.0) -> list[CurvePoint]:
    """Per missing slice PSNR/SSIM against distance from the brain extremity.

    Distance 1 slice is the outermost brain slice; it grows towards the
    acquired region.  Slices of the cut without region voxels are skipped.
    """
    if cut.n_slices == 0:
        return []
    a, b = _pair(ref, test)
    r = _region(region, a.shape)
    dz = float(getattr(ref, "spacing", (1.0, 1.0, 1.0))[CUT_AXIS])
    present = np.flatnonzero(r.any(axis=(0, 1)))
    if present.size == 0:
        return []
    values, valid = ssim_map(a, b, window, data_range=data_range)
    ordered = sorted(cut.slices, reverse=(cut.side == "top"))
    extremity = present[-1] if cut.side == "top" else present[0]
    points = []
    for k in ordered:
        rk = np.zeros_like(r)
        rk[:, :, k] = r[:, :, k]
        if not rk.any():
            continue
        centres = valid & rk
        s = float(values[centres].mean()) if centres.any() else float("nan")
        dist = (abs(int(extremity) - k) + 1) * dz
        points.append(CurvePoint(dist, psnr(a, b, rk, data_range), s))
    return points


def kruskal_wallis(groups: Sequence[Sequence[float]]) -> tuple[float, float]:
    """Kruskal-Wallis H with tie correction; p from chi-square with k-1 dof."""
    groups = [np.asarray(g, dtype=np.float64).reshape(-1) for g in groups]
    if len(groups) < 2 or any(g.size == 0 for g in groups):
        raise ValidationError("Kruskal-Wallis needs >= 2 non-empty groups")
    pooled = np.concatenate(groups)
    n = pooled.size
    ranks = _average_ranks(pooled)
    h = 0.0
    start = 0
    for g in groups:
        rbar = ranks[start:start + g.size].mean()
        h += g.size * (rbar - (n + 1) / 2.0) ** 2
        start += g.size
    h *= 12.0 / (n * (n + 1))
    _, counts = np.unique(pooled, return_counts=True)
    correction = 1.0 - (counts ** 3 - counts).sum() / (n ** 3 - n)
    if correction <= 0:
        return 0.0, 1.0
    h /= correction
    df = len(groups) - 1
    return float(h), float(special.gammaincc(df / 2.0, h / 2.0))


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    ranks = np.empty(x.size)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def paired_t_test(a, b) -> tuple[float, float]:
    """Two-sided paired t-test on ``b - a``.  Zero differences give (0, 1)."""
    x = np.asarray(a, dtype=np.float64).reshape(-1)
    y = np.asarray(b, dtype=np.float64).reshape(-1)
    if x.size != y.size:
        raise ValidationError(f"paired samples differ in length: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValidationError("paired t-test needs at least two pairs")
    d = y - x
    n = d.size
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0:
        if mean == 0:
            return 0.0, 1.0
        return float(np.copysign(np.inf, mean)), 0.0
    t = mean / (sd / np.sqrt(n))
    df = n - 1
    p = special.betainc(df / 2.0, 0.5, df / (df + t * t))
    return float(t), float(p)


class BlandAltman(NamedTuple):
    mean_diff: float
    sd_diff: float
    loa_low: float
    loa_high: float


def bland_altman(ref_vals, test_vals) -> BlandAltman:
    """Mean and sample sd of ``test - ref`` with 1.96 sd limits of agreement."""
    r = np.asarray(ref_vals, dtype=np.float64).reshape(-1)
    t = np.asarray(test_vals, dtype=np.float64).reshape(-1)
    if r.size != t.size:
        raise ValidationError(f"paired samples differ in length: {r.size} vs {t.size}")
    if r.size < 2:
        raise ValidationError("Bland-Altman needs at least two pairs")
    d = t - r
    m, s = float(d.mean()), float(d.std(ddof=1))
    return BlandAltman(m, s, m - 1.96 * s, m + 1.96 * s)


def mean_sd(values) -> tuple[float, float]:
    """Arithmetic mean and sample sd across subjects, ignoring non-finite entries."""
    v = np.asarray(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0
