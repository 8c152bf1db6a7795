"""Tensor fitting and a simple structure segmentation for Dice experiments.

This stands in for bundle segmentation: structures are read off the
fitted tensor field of an image (CSF by high mean diffusivity, parenchyma
by low, anisotropic tissue by FA), and optional atlas masks pick out
individual tracts as anisotropic voxels near the atlas structure.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .core import Mask3D, Volume4D
from .errors import ValidationError
from .preprocess import nearest_rank_percentile

CSF_MD = 1.5e-3
FA_TRACT = 0.4
BRAIN_FRACTION = 0.1


def fit_tensor(study: Volume4D, eps: float = 1e-6) -> np.ndarray:
    """Log-linear least-squares tensor fit; returns ``(i, j, k, 3, 3)`` in mm^2/s."""
    if study.gradient is None:
        raise ValidationError("tensor fit needs a gradient table")
    b = study.gradient.bvals
    g = study.gradient.bvecs
    if np.count_nonzero(b > study.gradient.b0_threshold) < 6:
        raise ValidationError("tensor fit needs at least six diffusion-weighted volumes")
    design = np.column_stack([
        np.ones_like(b),
        -b * g[:, 0] ** 2, -b * g[:, 1] ** 2, -b * g[:, 2] ** 2,
        -2 * b * g[:, 0] * g[:, 1], -2 * b * g[:, 0] * g[:, 2], -2 * b * g[:, 1] * g[:, 2],
    ])
    logs = np.log(np.maximum(study.data.astype(np.float64), eps)).reshape(-1, len(b))
    coef = logs @ np.linalg.pinv(design).T
    dxx, dyy, dzz, dxy, dxz, dyz = coef[:, 1:].T
    tens = np.stack([np.stack([dxx, dxy, dxz], -1), np.stack([dxy, dyy, dyz], -1),
                     np.stack([dxz, dyz, dzz], -1)], -2)
    return tens.reshape(*study.dims, 3, 3)


def md_fa(tensors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ev = np.linalg.eigvalsh(tensors)
    md = ev.mean(axis=-1)
    num = np.sqrt(((ev - md[..., None]) ** 2).sum(axis=-1))
    den = np.sqrt((ev ** 2).sum(axis=-1))
    with np.errstate(invalid="ignore", divide="ignore"):
        fa = np.where(den > 0, np.sqrt(1.5) * num / den, 0.0)
    return md, np.clip(fa, 0.0, 1.0)


def threshold_brain(study: Volume4D, fraction: float = BRAIN_FRACTION) -> np.ndarray:
    b0 = study.gradient.b0_mask if study.gradient is not None else np.ones(study.n_volumes, bool)
    mean_b0 = study.data[..., b0].mean(axis=-1)
    if not np.any(mean_b0 > 0):
        return np.zeros(study.dims, dtype=bool)
    return mean_b0 > fraction * nearest_rank_percentile(mean_b0)


def segment_structures(study: Volume4D, atlas: dict[str, Mask3D] | None = None,
                       atlas_margin: int = 2) -> dict[str, Mask3D]:
    """Label CSF, parenchyma and anisotropic tissue; one extra mask per atlas entry."""
    brain = threshold_brain(study)
    md, fa = md_fa(fit_tensor(study))
    grid = study.grid
    csf = brain & (md > CSF_MD)
    parenchyma = brain & ~csf
    aniso = parenchyma & (fa > FA_TRACT)
    out = {"csf": csf, "parenchyma": parenchyma, "anisotropic": aniso}
    for name, mask in (atlas or {}).items():
        near = ndimage.binary_dilation(mask.data, iterations=atlas_margin) if atlas_margin else mask.data
        out[name] = aniso & near
    return {k: Mask3D.on_grid(v, grid) for k, v in out.items()}
