"""Synthetic brains from a voxelwise diffusion-tensor field.

The phantom is an ellipsoid with an outer CSF shell, a grey-matter shell and
a white-matter core, crossed by a few anisotropic cylindrical "tracts".  One
tract always runs inferior-superior through the top of the brain so that FOV
cuts intersect it.  Tissue boundaries are one-voxel linear ramps and each
voxel carries a single tensor (the fraction-weighted mean of its tissues),
so the noiseless signal is exactly ``S0 * exp(-b g^T D g)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import GradientTable, GridSpec, Mask3D, Volume3D, Volume4D
from .errors import ValidationError


@dataclass
class PhantomSpec:
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    semi_axes_mm: tuple[float, float, float] = (24.0, 27.0, 25.0)
    shape_jitter: float = 0.06
    center_jitter_mm: float = 1.5
    csf_thickness_mm: float = 2.5
    gm_thickness_mm: float = 4.0
    csf_md: float = 3.0e-3
    gm_md: float = 0.8e-3
    wm_md: float = 0.7e-3
    tract_axial: float = 1.7e-3
    tract_radial: float = 0.3e-3
    n_tracts: int = 3
    tract_radius_mm: float = 3.5
    s0_scale: float = 1000.0
    t1_scale: float = 800.0
    intensity_jitter: float = 0.15
    noise_sigma: float = 0.02
    t1_noise_sigma: float = 0.005
    seed: int = 0

    def validate(self):
        if len(self.dims) != 3 or min(self.dims) < 8:
            raise ValidationError(f"phantom dims must be three ints >= 8, got {self.dims}")
        if min(self.spacing) <= 0:
            raise ValidationError("phantom spacing must be positive")
        extent = np.array(self.dims) * np.array(self.spacing) / 2.0
        reach = np.array(self.semi_axes_mm) * (1 + self.shape_jitter) + self.center_jitter_mm + 1.0
        if min(self.semi_axes_mm) <= self.csf_thickness_mm + self.gm_thickness_mm + 1:
            raise ValidationError("semi-axes too small for the tissue shells")
        if np.any(reach > extent):
            raise ValidationError(f"ellipsoid {self.semi_axes_mm} mm does not fit the grid")
        if self.n_tracts < 2:
            raise ValidationError("phantoms need at least two tracts")
        if self.noise_sigma < 0 or self.t1_noise_sigma < 0:
            raise ValidationError("noise sigma must be >= 0")


@dataclass(frozen=True, eq=False)
class TensorField:
    """Per-voxel symmetric PSD tensors in mm^2/s, shape ``(i, j, k, 3, 3)``, plus S0."""

    tensors: np.ndarray
    s0: Volume3D

    def __post_init__(self):
        d = np.asarray(self.tensors, dtype=np.float64)
        if d.shape != (*self.s0.dims, 3, 3):
            raise ValidationError(f"tensor shape {d.shape} does not match S0 {self.s0.dims}")
        if not np.allclose(d, np.swapaxes(d, -1, -2), atol=1e-15):
            raise ValidationError("tensors must be symmetric")
        object.__setattr__(self, "tensors", d)

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.tensors).min())

    def quadratic_form(self, g) -> np.ndarray:
        g = np.asarray(g, dtype=np.float64)
        return np.einsum("...ab,a,b->...", self.tensors, g, g)


@dataclass(frozen=True, eq=False)
class Phantom:
    t1: Volume3D
    tensors: TensorField
    masks: dict[str, Mask3D] = field(default_factory=dict)

    @property
    def brain(self) -> Mask3D:
        return self.masks["brain"]


def phantom_grid(spec: PhantomSpec) -> GridSpec:
    dims = np.array(spec.dims)
    spacing = np.array(spec.spacing, dtype=np.float64)
    affine = np.diag([*spacing, 1.0])
    affine[:3, 3] = -(dims - 1) / 2.0 * spacing
    return GridSpec(tuple(spec.dims), tuple(spec.spacing), affine)


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def _ramp(signed_mm, width_mm):
    return np.clip(signed_mm / width_mm + 0.5, 0.0, 1.0)


def _tract_geometry(rng: np.random.Generator, n_tracts: int, centre: np.ndarray,
                    semi: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """(point, direction) per tract in world mm."""
    tracts = []
    # inferior-superior tract reaching the vertex (corticospinal-like)
    tilt = np.deg2rad(rng.uniform(0, 20))
    azim = rng.uniform(0, 2 * np.pi)
    direction = np.array([np.sin(tilt) * np.cos(azim), np.sin(tilt) * np.sin(azim), np.cos(tilt)])
    offset = np.array([rng.uniform(-0.3, 0.3) * semi[0], rng.uniform(-0.3, 0.3) * semi[1], 0.0])
    tracts.append((centre + offset, direction))
    # remaining tracts roughly horizontal, spread over the upper half
    for t in range(1, n_tracts):
        azim = rng.uniform(0, np.pi)
        elev = np.deg2rad(rng.uniform(-20, 20))
        direction = np.array([np.cos(elev) * np.cos(azim), np.cos(elev) * np.sin(azim), np.sin(elev)])
        height = rng.uniform(-0.1, 0.55) * semi[2]
        offset = np.array([rng.uniform(-0.2, 0.2) * semi[0], rng.uniform(-0.2, 0.2) * semi[1], height])
        tracts.append((centre + offset, direction))
    return tracts


def make_phantom(spec: PhantomSpec) -> Phantom:
    """Build T1, tensor field and structure masks; deterministic in ``spec.seed``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    grid = phantom_grid(spec)
    semi = np.array(spec.semi_axes_mm) * (1 + rng.uniform(-spec.shape_jitter, spec.shape_jitter, 3))
    centre = rng.uniform(-spec.center_jitter_mm, spec.center_jitter_mm, 3)
    tracts = _tract_geometry(rng, spec.n_tracts, centre, semi)
    s0_gain = 1 + rng.uniform(-spec.intensity_jitter, spec.intensity_jitter)
    t1_gain = 1 + rng.uniform(-spec.intensity_jitter, spec.intensity_jitter)

    idx = np.indices(grid.dims, dtype=np.float64).reshape(3, -1)
    xyz = (grid.affine[:3, :3] @ idx + grid.affine[:3, 3:4]).T  # (N, 3) world mm
    rel = xyz - centre
    r = np.sqrt(((rel / semi) ** 2).sum(axis=1))
    radial = np.linalg.norm(rel, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = np.where(r > 0, radial * (1.0 / r - 1.0), np.inf)  # mm inside the surface
    width = float(min(spec.spacing))
    f_brain = _ramp(depth, width)
    f_par = _ramp(depth - spec.csf_thickness_mm, width)
    f_wm = _ramp(depth - spec.csf_thickness_mm - spec.gm_thickness_mm, width)

    f_tract = []
    for point, direction in tracts:
        d = xyz - point
        dist = np.linalg.norm(d - np.outer(d @ direction, direction), axis=1)
        f_tract.append(_ramp(spec.tract_radius_mm - dist, width))
    f_tract = np.array(f_tract)
    t_sum = f_tract.sum(axis=0)
    keep = 1.0 - np.minimum(1.0, t_sum)
    share = f_tract / np.maximum(1.0, t_sum)

    w_csf = f_brain - f_par
    w_gm = (f_par - f_wm) * keep
    w_wm = f_wm * keep
    w_tracts = share * f_par

    eye = np.eye(3)
    d_csf, d_gm, d_wm = spec.csf_md * eye, spec.gm_md * eye, spec.wm_md * eye
    d_tracts = [spec.tract_axial * np.outer(u, u) + spec.tract_radial * (eye - np.outer(u, u))
                for _, u in tracts]

    tens = (w_csf[:, None, None] * d_csf + w_gm[:, None, None] * d_gm
            + w_wm[:, None, None] * d_wm)
    for w, dt in zip(w_tracts, d_tracts):
        tens = tens + w[:, None, None] * dt
    with np.errstate(divide="ignore", invalid="ignore"):
        tens = np.where(f_brain[:, None, None] > 0, tens / f_brain[:, None, None], 0.0)
    tens = 0.5 * (tens + np.swapaxes(tens, -1, -2))

    s0 = spec.s0_scale * s0_gain * (1.0 * w_csf + 0.8 * w_gm + 0.65 * w_wm + 0.6 * w_tracts.sum(0))
    t1 = spec.t1_scale * t1_gain * (0.25 * w_csf + 0.6 * w_gm + 0.9 * w_wm + 1.0 * w_tracts.sum(0))
    if spec.t1_noise_sigma > 0:
        brain_any = f_brain > 0
        t1 = t1 + brain_any * rng.normal(0.0, spec.t1_noise_sigma * spec.t1_scale, t1.shape)
        t1 = np.maximum(t1, 0.0) * brain_any

    shape = grid.dims
    brain = f_brain.reshape(shape) >= 0.5
    labels = np.argmax(np.stack([w_csf, w_gm, w_wm, w_tracts.sum(0)]), axis=0).reshape(shape)
    masks = {
        "brain": brain,
        "csf": brain & (labels == 0),
        "gm": brain & (labels == 1),
        "wm": brain & (labels >= 2),
    }
    for t, f in enumerate(f_tract):
        masks[f"tract_{t}"] = brain & (f.reshape(shape) >= 0.5)

    s0_vol = Volume3D.on_grid(s0.reshape(shape).astype(np.float32), grid)
    return Phantom(
        t1=Volume3D.on_grid(t1.reshape(shape).astype(np.float32), grid),
        tensors=TensorField(tens.reshape(*shape, 3, 3), s0_vol),
        masks={k: Mask3D.on_grid(v, grid) for k, v in masks.items()},
    )


def gradient_directions(n: int, iterations: int = 300) -> np.ndarray:
    """``n`` unit vectors spread over the half-sphere by antipodal electrostatic repulsion.

    Deterministic: starts from a Fibonacci lattice on the upper hemisphere.
    """
    i = np.arange(n) + 0.5
    z = 1.0 - i / n
    phi = np.pi * (1 + 5 ** 0.5) * i
    rho = np.sqrt(1 - z ** 2)
    pts = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
    step = 0.1
    for _ in range(iterations):
        force = np.zeros_like(pts)
        for sign in (1.0, -1.0):
            diff = pts[:, None, :] - sign * pts[None, :, :]
            dist = np.linalg.norm(diff, axis=-1)
            np.fill_diagonal(dist, np.inf)
            force += (diff / dist[..., None] ** 3).sum(axis=1)
        force -= (force * pts).sum(axis=1, keepdims=True) * pts
        pts = pts + step * force / np.abs(force).max()
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
        step *= 0.99
    pts[pts[:, 2] < 0] *= -1
    return pts


def default_gradient_table(n_directions: int = 40, n_b0: int = 1, bval: float = 1300.0) -> GradientTable:
    dirs = gradient_directions(n_directions)
    bvals = np.concatenate([np.zeros(n_b0), np.full(n_directions, bval)])
    bvecs = np.concatenate([np.zeros((n_b0, 3)), dirs])
    return GradientTable(bvals, bvecs)


def simulate_dwi(tensors: TensorField, s0: Volume3D, gradient: GradientTable,
                 sigma: float = 0.0, rng: np.random.Generator | None = None) -> Volume4D:
    """Tensor-model signal ``S0 exp(-b g^T D g)`` per volume, optionally with Rician noise.

    ``sigma`` is in the same units as ``s0``.
    """
    if sigma < 0:
        raise ValidationError("sigma must be >= 0")
    if sigma > 0 and rng is None:
        rng = np.random.default_rng(0)
    s0_data = s0.data.astype(np.float64)
    out = np.empty((*s0.dims, len(gradient)), dtype=np.float32)
    for v in range(len(gradient)):
        b, g = gradient[v]
        signal = s0_data * np.exp(-b * tensors.quadratic_form(g)) if b > 0 else s0_data.copy()
        if sigma > 0:
            signal = np.hypot(signal + rng.normal(0.0, sigma, signal.shape),
                              rng.normal(0.0, sigma, signal.shape))
        out[..., v] = signal
    return Volume4D(out, s0.spacing, s0.affine, gradient)


@dataclass(frozen=True, eq=False)
class PhantomStudy:
    dwi: Volume4D
    phantom: Phantom

    @property
    def t1(self) -> Volume3D:
        return self.phantom.t1


def make_study(spec: PhantomSpec, gradient: GradientTable | None = None) -> PhantomStudy:
    """Phantom plus its simulated DWI; noise sigma is ``spec.noise_sigma * spec.s0_scale``."""
    phantom = make_phantom(spec)
    gradient = gradient if gradient is not None else default_gradient_table()
    rng = np.random.default_rng([spec.seed, 1])
    dwi = simulate_dwi(phantom.tensors, phantom.tensors.s0, gradient,
                       spec.noise_sigma * spec.s0_scale, rng)
    return PhantomStudy(dwi, phantom)
