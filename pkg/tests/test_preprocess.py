import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from fovx.core import GridSpec, Mask3D, Volume3D, Volume4D
from fovx.errors import DegenerateInputError
from fovx.preprocess import (denormalize, from_normalized_space, nearest_rank_percentile,
                             normalize_intensity, normalize_t1, normalized_grid, resample,
                             to_normalized_space)

from conftest import make_study_from, make_volume


def test_constant_study_normalizes_to_one():
    norm, params = normalize_intensity(make_study_from(np.full((4, 4, 4, 2), 5.0)))
    assert params.p999 == 5.0
    assert np.all(norm.data == 1.0)


def test_ramp_percentile_matches_sort_oracle():
    ramp = np.arange(1, 10**6 + 1, dtype=np.float64)
    np.random.default_rng(0).shuffle(ramp)
    oracle = np.sort(ramp)[int(np.ceil(0.999 * ramp.size)) - 1]
    assert nearest_rank_percentile(ramp) == oracle == 999000.0


def test_clamp_above_and_below():
    data = np.linspace(0, 999, 1000).reshape(10, 10, 10, 1)
    data[0, 0, 0, 0] = -3.0
    data[9, 9, 9, 0] = 5000.0
    norm, params = normalize_intensity(make_study_from(data))
    assert norm.data[0, 0, 0, 0] == 0.0
    assert norm.data[9, 9, 9, 0] == 1.0
    assert params.p999 == np.sort(data.ravel())[998]


def test_t1_ramp_and_degenerate():
    t1 = make_volume(np.arange(1000, dtype=np.float32).reshape(10, 10, 10))
    _, params = normalize_t1(t1)
    assert params.p999 == 998.0  # 999th smallest of 0..999
    with pytest.raises(DegenerateInputError):
        normalize_t1(make_volume(np.zeros((4, 4, 4))))


def test_denormalize_inverts_inside_range(rng):
    data = rng.uniform(0, 100, (6, 6, 6, 2))
    norm, params = normalize_intensity(make_study_from(data))
    back = denormalize(norm.data, params)
    inside = data <= params.p999
    np.testing.assert_allclose(back[inside], data[inside], rtol=1e-6)


@given(arrays(np.float64, (5, 5, 4, 2), elements=st.floats(-10, 1000)))
def test_normalization_idempotent(data):
    if not np.any(data > 0) or nearest_rank_percentile(data) <= 0:
        return
    once, _ = normalize_intensity(make_study_from(data))
    twice, _ = normalize_intensity(once)
    assert np.max(np.abs(twice.data - once.data)) <= 2 * np.finfo(np.float32).eps


@given(arrays(np.float64, (4, 4, 4, 3), elements=st.floats(0.01, 1000)))
def test_normalization_shares_one_scale(data):
    study = make_study_from(data)
    norm, params = normalize_intensity(study)
    x = study.data
    ok = np.all(x <= params.p999, axis=-1)
    u, w = x[ok][:, 0].astype(np.float64), x[ok][:, 1].astype(np.float64)
    un, wn = norm.data[ok][:, 0].astype(np.float64), norm.data[ok][:, 1].astype(np.float64)
    np.testing.assert_allclose(un / wn, u / w, rtol=1e-6)


def _grid(dims, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    affine = np.diag([*spacing, 1.0])
    affine[:3, 3] = origin
    return GridSpec(dims, spacing, affine)


def test_resample_constant_field():
    vol = make_volume(np.full((6, 6, 6), 7.0), (2.0, 2.0, 2.0))
    target = _grid((8, 8, 8), (1.0, 1.0, 1.0), (1.0, 1.0, 1.0))
    out = resample(vol, target)
    assert np.all(out.data == 7.0)


def test_resample_identity_is_bit_exact(rng):
    vol = make_volume(rng.normal(size=(7, 8, 9)), (1.5, 1.0, 2.0))
    out = resample(vol, vol.grid)
    assert out.data.tobytes() == vol.data.tobytes()


def test_resample_trilinear_probes():
    i, j, k = np.meshgrid(np.arange(4), np.arange(4), np.arange(4), indexing="ij")
    src = (1.0 * i + 10.0 * j + 100.0 * k + 0.5 * i * j * k).astype(np.float32)
    vol = make_volume(src, (2.0, 2.0, 2.0))
    out = resample(vol, _grid((8, 8, 8))).data

    def trilinear(x, y, z):
        x0, y0, z0 = int(np.floor(x)), int(np.floor(y)), int(np.floor(z))
        total = 0.0
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    w = ((x - x0) if dx else (1 - (x - x0))) * ((y - y0) if dy else (1 - (y - y0))) \
                        * ((z - z0) if dz else (1 - (z - z0)))
                    if w:
                        total += w * src[x0 + dx, y0 + dy, z0 + dz]
        return total

    for p in [(0, 0, 0), (1, 2, 3), (3, 5, 1), (5, 5, 5), (6, 1, 4)]:
        assert out[p] == pytest.approx(trilinear(*(c / 2.0 for c in p)), rel=1e-6)
    # outside the hull of source centres
    assert out[7, 0, 0] == 0.0


@given(arrays(np.float64, (5, 5, 5), elements=st.floats(-100, 100)),
       st.tuples(*[st.floats(-3, 3)] * 3), st.floats(0.6, 1.7))
def test_trilinear_is_convex_combination(data, shift, spacing):
    vol = make_volume(data)
    out = resample(vol, _grid((6, 6, 6), (spacing,) * 3, shift)).data
    lo, hi = min(0.0, data.min()), max(0.0, data.max())
    tol = 1e-4 * max(1.0, np.abs(data).max())
    assert out.min() >= lo - tol and out.max() <= hi + tol


@given(arrays(np.bool_, (6, 6, 6)), st.tuples(*[st.floats(-2, 2)] * 3))
def test_nearest_mask_stays_binary(data, shift):
    mask = Mask3D(data, (1, 1, 1), np.eye(4))
    out = resample(mask, _grid((5, 5, 5), (1.3, 1.3, 1.3), shift))
    assert out.data.dtype == bool
    assert set(np.unique(out.data)) <= {False, True}


def test_to_normalized_identity(rng):
    study = make_study_from(rng.uniform(0, 1, (64, 64, 64, 2)))
    t1 = make_volume(rng.uniform(0, 1, (64, 64, 64)))
    ns, nt1, grid = to_normalized_space(study, t1, np.eye(4), (64, 64, 64))
    assert ns.data.tobytes() == study.data.tobytes()
    assert nt1.data.tobytes() == t1.data.tobytes()
    assert grid.spacing == (1.0, 1.0, 1.0)


def test_to_normalized_translation_shifts_t1():
    study = make_study_from(np.ones((32, 32, 32, 1)))
    impulse = np.zeros((32, 32, 32), np.float32)
    impulse[10, 12, 8] = 1.0
    reg = np.eye(4)
    reg[2, 3] = 10.0
    _, nt1, _ = to_normalized_space(study, make_volume(impulse), reg, (32, 32, 32))
    assert np.unravel_index(np.argmax(nt1.data), nt1.dims) == (10, 12, 18)


def test_larger_dwi_is_cropped_symmetrically():
    data = np.zeros((40, 40, 40, 1))
    data[..., 0] = np.arange(40)[:, None, None]
    study = make_study_from(data)
    ns, _, grid = to_normalized_space(study, make_volume(np.ones((40, 40, 40))), None, (32, 32, 32))
    assert ns.data[0, 0, 0, 0] == 4.0 and ns.data[-1, 0, 0, 0] == 35.0
    assert normalized_grid(study.grid, (32, 32, 32)).same_as(grid)


def test_roundtrip_through_normalized_space_smooth_phantom():
    dims, spacing = (30, 28, 26), (1.3, 1.2, 1.6)
    affine = np.diag([*spacing, 1.0])
    affine[:3, 3] = (-20.0, -15.0, -18.0)
    x, y, z = np.meshgrid(*[np.arange(n) * s for n, s in zip(dims, spacing)], indexing="ij")
    field = 0.5 + 0.25 * np.sin(x / 9.0) * np.cos(y / 11.0) + 0.2 * np.cos(z / 13.0)
    vol = Volume3D(field.astype(np.float32), spacing, affine)
    study = Volume4D(field[..., None].astype(np.float32), spacing, affine)
    ns, _, _ = to_normalized_space(study, vol, None, (48, 48, 48))
    back = from_normalized_space(ns.volume(0), vol.grid)
    err = np.abs(back.data - vol.data)[2:-2, 2:-2, 2:-2]
    assert err.max() < 0.02


def test_from_normalized_constant_and_identity(rng):
    grid = _grid((8, 9, 10))
    const = Volume3D.on_grid(np.full(grid.dims, 3.0, np.float32), grid)
    sub = _grid((5, 5, 5), (1.5, 1.5, 1.5), (1.0, 1.0, 1.0))
    assert np.all(from_normalized_space(const, sub).data == 3.0)
    rand = Volume3D.on_grid(rng.normal(size=grid.dims).astype(np.float32), grid)
    assert from_normalized_space(rand, grid).data.tobytes() == rand.data.tobytes()
