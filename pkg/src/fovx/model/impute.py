"""Inference: per-plane slice prediction, plane fusion and whole-study imputation."""

from __future__ import annotations

import numpy as np
import torch

from ..core import GENERATOR_PLANES, Plane, ShellId, Volume3D, Volume4D
from ..errors import ValidationError
from ..fov import compute_acquired_mask
from ..patches import composite_output, slab_batch
from ..preprocess import (denormalize, from_normalized_space, normalize_intensity, normalize_t1,
                          to_normalized_space)
from .bundle import ModelBundle


@torch.no_grad()
def predict_plane(generator, dwi: np.ndarray, t1: np.ndarray, plane: Plane, n: int,
                  batch_size: int = 32) -> np.ndarray:
    """Predict every slice along ``plane`` and restack into a volume shaped like ``dwi``."""
    size = dwi.shape[plane.axis]
    out = []
    for start in range(0, size, batch_size):
        centers = np.arange(start, min(size, start + batch_size))
        x = torch.from_numpy(slab_batch(dwi, t1, plane, centers, n))
        out.append(generator(x)[:, 0].numpy())
    stack = np.concatenate(out, axis=0)
    return np.moveaxis(stack, 0, plane.axis).astype(np.float32)


def predict_volume(bundle: ModelBundle, shell: ShellId, dwi: np.ndarray, t1: np.ndarray,
                   batch_size: int = 32) -> np.ndarray:
    """Sagittal and coronal predictions for one volume, voxel-averaged."""
    sag, cor = (predict_plane(bundle.generator(shell, p), dwi, t1, p, bundle.config.n, batch_size)
                for p in GENERATOR_PLANES)
    return (sag + cor) * np.float32(0.5)


def impute_normalized(study: Volume4D, t1: Volume3D, bundle: ModelBundle,
                      volumes=None) -> np.ndarray:
    """Fused predictions ``(i, j, k, len(volumes))`` for a study already in normalized space."""
    if study.gradient is None:
        raise ValidationError("imputation needs a gradient table to pick generators")
    if study.dims != t1.dims:
        raise ValidationError(f"study {study.dims} and T1 {t1.dims} are on different grids")
    shells = study.gradient.shells()
    volumes = range(study.n_volumes) if volumes is None else list(volumes)
    preds = [predict_volume(bundle, shells[v], study.data[..., v], t1.data) for v in volumes]
    return np.stack(preds, axis=-1)


def impute_study(study: Volume4D, t1: Volume3D, reg_affine, bundle: ModelBundle) -> Volume4D:
    """Fill slices outside the FOV of a subject-space study.

    Acquired voxels are copied verbatim from ``study``; imputed voxels are
    predicted on the normalized grid, resampled back to the subject grid and
    rescaled to the study's intensity range.
    """
    if study.gradient is None:
        raise ValidationError("imputation needs a gradient table")
    shells = study.gradient.shells()  # fails fast on unsupported shells
    norm, params = normalize_intensity(study)
    t1n, _ = normalize_t1(t1)
    acquired = compute_acquired_mask(norm)
    if acquired.data.all():
        return study
    ns, nt1, _ = to_normalized_space(norm, t1n, reg_affine, bundle.grid_dims)
    subject_grid = study.grid
    out = np.empty_like(study.data)
    for v in range(study.n_volumes):
        fused = Volume3D.on_grid(predict_volume(bundle, shells[v], ns.data[..., v], nt1.data), ns.grid)
        back = from_normalized_space(fused, subject_grid)
        y_hat = back.with_data(denormalize(back.data, params))
        out[..., v] = composite_output(study.volume(v), y_hat, acquired).data
    return study.with_data(out)
