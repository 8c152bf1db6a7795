"""Volumetric data model: grids, scalar volumes, DWI studies and gradient tables.

Arrays are indexed ``[i, j, k]`` (``[i, j, k, v]`` for studies) in voxel
order, matching the on-disk NIfTI layout.  The fixed axis convention is

* axis 0 (i): left-right, slices along it are *sagittal*
* axis 1 (j): posterior-anterior, slices along it are *coronal*
* axis 2 (k): inferior-superior, slices along it are *axial*; FOV cuts
  happen along this axis and "top" means high ``k``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import GeometryError, UnsupportedShellError, ValidationError

B0_THRESHOLD = 50.0
SHELL_TOLERANCE = 100.0
B_SHELL = 1300.0
BVEC_NORM_TOL = 1e-3


class ShellId(enum.Enum):
    B0 = "b0"
    B1300 = "b1300"


class Plane(enum.Enum):
    SAGITTAL = "sagittal"
    CORONAL = "coronal"
    AXIAL = "axial"

    @property
    def axis(self) -> int:
        return {"sagittal": 0, "coronal": 1, "axial": 2}[self.value]


GENERATOR_PLANES = (Plane.SAGITTAL, Plane.CORONAL)
GENERATOR_KEYS = tuple((s, p) for s in ShellId for p in GENERATOR_PLANES)
CUT_AXIS = 2


def classify_shell(b: float, b0_threshold: float = B0_THRESHOLD,
                   shell_tolerance: float = SHELL_TOLERANCE) -> ShellId:
    """Map a b-value (s/mm^2) to one of the two supported shells.

    Raises :class:`UnsupportedShellError` for anything outside both windows.
    """
    if not np.isfinite(b) or b < 0:
        raise ValidationError(f"b-value must be finite and >= 0, got {b}")
    if b <= b0_threshold:
        return ShellId.B0
    if abs(b - B_SHELL) <= shell_tolerance:
        return ShellId.B1300
    raise UnsupportedShellError(
        f"b={b:g} s/mm^2 is neither b0 (<= {b0_threshold:g}) nor "
        f"{B_SHELL:g} +/- {shell_tolerance:g}")


def _frozen(arr: np.ndarray) -> np.ndarray:
    view = arr.view()
    view.flags.writeable = False
    return view


def _check_geometry(shape, spacing, affine) -> tuple[tuple[int, ...], tuple[float, ...], np.ndarray]:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) <= 0:
        raise ValidationError(f"dims must be three positive ints, got {shape}")
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(np.isfinite(spacing)) or min(spacing) <= 0:
        raise ValidationError(f"spacing must be three positive numbers, got {spacing}")
    affine = np.asarray(affine, dtype=np.float64)
    if affine.shape != (4, 4) or not np.all(np.isfinite(affine)):
        raise GeometryError("affine must be a finite 4x4 matrix")
    if abs(np.linalg.det(affine[:3, :3])) <= 0:
        raise GeometryError("affine 3x3 block is singular")
    return shape, spacing, _frozen(affine)


@dataclass(frozen=True, eq=False)
class GridSpec:
    """Voxel grid geometry: dims, per-axis spacing (mm) and voxel->world affine."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    affine: np.ndarray

    def __post_init__(self):
        dims, spacing, affine = _check_geometry(self.dims, self.spacing, self.affine)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", affine)

    def same_as(self, other: "GridSpec", atol: float = 1e-5) -> bool:
        return (self.dims == other.dims
                and np.allclose(self.spacing, other.spacing, atol=atol)
                and np.allclose(self.affine, other.affine, atol=atol))

    @classmethod
    def from_affine(cls, dims, affine) -> "GridSpec":
        affine = np.asarray(affine, dtype=np.float64)
        spacing = tuple(np.linalg.norm(affine[:3, :3], axis=0))
        return cls(tuple(dims), spacing, affine)

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "spacing": list(self.spacing),
                "affine": self.affine.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(tuple(d["dims"]), tuple(d["spacing"]), np.array(d["affine"]))


@dataclass(frozen=True, eq=False)
class Volume3D:
    """A 3-D scalar field with float32 values on a :class:`GridSpec`."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ValidationError(f"Volume3D needs 3-D data, got shape {data.shape}")
        _, spacing, affine = _check_geometry(data.shape, self.spacing, self.affine)
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", affine)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.dims, self.spacing, self.affine)

    def with_data(self, data) -> "Volume3D":
        return replace(self, data=data)

    @classmethod
    def on_grid(cls, data, grid: GridSpec) -> "Volume3D":
        data = np.asarray(data)
        if data.shape != grid.dims:
            raise GeometryError(f"data shape {data.shape} does not match grid {grid.dims}")
        return cls(data, grid.spacing, grid.affine)


@dataclass(frozen=True, eq=False)
class Mask3D:
    """Binary mask sharing the geometry of a companion volume."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.dtype != bool:
            if not np.all((raw == 0) | (raw == 1)):
                raise ValidationError("mask values must be 0 or 1")
            raw = raw.astype(bool)
        if raw.ndim != 3:
            raise ValidationError(f"Mask3D needs 3-D data, got shape {raw.shape}")
        _, spacing, affine = _check_geometry(raw.shape, self.spacing, self.affine)
        object.__setattr__(self, "data", _frozen(raw))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", affine)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.dims, self.spacing, self.affine)

    @classmethod
    def on_grid(cls, data, grid: GridSpec) -> "Mask3D":
        data = np.asarray(data)
        if data.shape != grid.dims:
            raise GeometryError(f"mask shape {data.shape} does not match grid {grid.dims}")
        return cls(data, grid.spacing, grid.affine)

    def as_volume(self) -> Volume3D:
        return Volume3D(self.data.astype(np.float32), self.spacing, self.affine)


@dataclass(frozen=True, eq=False)
class GradientTable:
    """b-values (s/mm^2) and unit b-vectors, one row per DWI volume."""

    bvals: np.ndarray
    bvecs: np.ndarray
    b0_threshold: float = B0_THRESHOLD

    def __post_init__(self):
        bvals = np.asarray(self.bvals, dtype=np.float64).reshape(-1)
        bvecs = np.asarray(self.bvecs, dtype=np.float64)
        if bvecs.ndim != 2 or bvecs.shape[1] != 3 or bvecs.shape[0] != bvals.size:
            raise ValidationError(
                f"need V b-values and Vx3 b-vectors, got {bvals.size} and {bvecs.shape}")
        if bvals.size < 1:
            raise ValidationError("gradient table is empty")
        if not np.all(np.isfinite(bvals)) or np.any(bvals < 0):
            raise ValidationError("b-values must be finite and >= 0")
        norms = np.linalg.norm(bvecs, axis=1)
        bad = (bvals > self.b0_threshold) & (np.abs(norms - 1.0) > BVEC_NORM_TOL)
        if np.any(bad):
            idx = np.flatnonzero(bad)
            raise ValidationError(
                f"diffusion-weighted volumes {idx.tolist()} have non-unit b-vectors "
                f"(norms {norms[idx].round(4).tolist()})")
        object.__setattr__(self, "bvals", _frozen(bvals))
        object.__setattr__(self, "bvecs", _frozen(bvecs))

    def __len__(self) -> int:
        return self.bvals.size

    def __getitem__(self, v: int) -> tuple[float, np.ndarray]:
        return float(self.bvals[v]), self.bvecs[v]

    def shells(self, **kw) -> list[ShellId]:
        kw.setdefault("b0_threshold", self.b0_threshold)
        return [classify_shell(b, **kw) for b in self.bvals]

    @property
    def b0_mask(self) -> np.ndarray:
        return self.bvals <= self.b0_threshold


@dataclass(frozen=True, eq=False)
class Volume4D:
    """A DWI study: V volumes on one grid, stored as an ``(i, j, k, V)`` array.

    ``gradient`` may be ``None`` right after reading a NIfTI file; attach the
    table with :meth:`with_gradient`.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))
    gradient: GradientTable | None = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 4 or data.shape[3] < 1:
            raise ValidationError(f"Volume4D needs (i,j,k,V) data with V >= 1, got {data.shape}")
        _, spacing, affine = _check_geometry(data.shape[:3], self.spacing, self.affine)
        if self.gradient is not None and len(self.gradient) != data.shape[3]:
            raise ValidationError(
                f"gradient table has {len(self.gradient)} entries for {data.shape[3]} volumes")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", affine)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape[:3]

    @property
    def n_volumes(self) -> int:
        return self.data.shape[3]

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.dims, self.spacing, self.affine)

    def volume(self, v: int) -> Volume3D:
        return Volume3D(self.data[..., v], self.spacing, self.affine)

    @property
    def volumes(self) -> list[Volume3D]:
        return [self.volume(v) for v in range(self.n_volumes)]

    def with_gradient(self, gradient: GradientTable | None) -> "Volume4D":
        return replace(self, gradient=gradient)

    def with_data(self, data) -> "Volume4D":
        return replace(self, data=data)

    @classmethod
    def stack(cls, volumes, gradient: GradientTable | None = None) -> "Volume4D":
        volumes = list(volumes)
        if not volumes:
            raise ValidationError("cannot stack zero volumes")
        first = volumes[0]
        for vol in volumes[1:]:
            if not vol.grid.same_as(first.grid, atol=0):
                raise GeometryError("all volumes of a study must share one grid")
        data = np.stack([v.data for v in volumes], axis=-1)
        return cls(data, first.spacing, first.affine, gradient)


def require_same_grid(*items, atol: float = 1e-5) -> GridSpec:
    """Return the common grid of ``items`` or raise :class:`GeometryError`."""
    grid = items[0].grid
    for item in items[1:]:
        if not grid.same_as(item.grid, atol=atol):
            raise GeometryError(
                f"grid mismatch: {grid.dims} vs {item.grid.dims} (or differing affine)")
    return grid
