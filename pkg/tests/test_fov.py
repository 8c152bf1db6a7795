import numpy as np
import pytest
from hypothesis import given, strategies as st

from fovx.core import Mask3D
from fovx.errors import ValidationError
from fovx.fov import (FovCut, brain_extent, compute_acquired_mask, cut_from_brain, cutoff_side,
                      draw_training_cut, estimate_cutoff, estimate_cutoff_thickness, otsu_threshold,
                      simulate_cutoff, slice_mask)
from fovx.preprocess import normalize_intensity

from conftest import make_study_from


def _study(rng, dims=(8, 8, 40), v=2):
    return make_study_from(rng.uniform(0.5, 1.0, (*dims, v)))


def test_zero_extent_is_identity(rng):
    study = _study(rng)
    out, cut, mask = simulate_cutoff(study, 0.0, "top")
    assert out.data.tobytes() == study.data.tobytes()
    assert mask.data.all() and cut.n_slices == 0 and cut.side == "none"


def test_thirty_mm_top_cut(rng):
    study = make_study_from(rng.uniform(0.5, 1.0, (4, 4, 64, 1)))
    out, cut, mask = simulate_cutoff(study, 30.0, "top")
    assert cut.slice_range == (34, 64) and cut.extent_mm == 30.0
    assert np.all(out.data[:, :, 34:] == 0)
    assert out.data[:, :, :34].tobytes() == study.data[:, :, :34].tobytes()
    assert not mask.data[:, :, 34:].any() and mask.data[:, :, :34].all()


def test_cut_rounds_to_whole_slices_on_coarse_grid(rng):
    study = make_study_from(rng.uniform(size=(4, 4, 20, 1)), spacing=(2.0, 2.0, 2.5))
    _, cut, _ = simulate_cutoff(study, 6.0, "bottom")
    assert cut.slice_range == (0, 2) and cut.extent_mm == 5.0


def test_cut_larger_than_grid_rejected(rng):
    with pytest.raises(ValidationError):
        simulate_cutoff(_study(rng), 50.0, "top")
    with pytest.raises(ValidationError):
        simulate_cutoff(_study(rng), 5.0, "left")


def test_fovcut_invariants():
    with pytest.raises(ValidationError):
        FovCut("none", 0.0, (0, 3))
    with pytest.raises(ValidationError):
        FovCut("top", 1.0, (5, 3))


def test_training_cut_is_seeded():
    a = [draw_training_cut(np.random.default_rng(7)) for _ in range(3)]
    b = [draw_training_cut(np.random.default_rng(7)) for _ in range(3)]
    assert a == b


def test_training_cut_distribution():
    rng = np.random.default_rng(2024)
    draws = [draw_training_cut(rng) for _ in range(10_000)]
    extents = np.array([d[0] for d in draws])
    assert extents.min() >= 0 and extents.max() <= 50
    assert abs(extents.mean() - 25.0) <= 1.5
    assert abs(np.mean([d[1] == "top" for d in draws]) - 0.5) <= 0.05


def test_acquired_mask_recovers_simulated_cut(phantom_study):
    cut, fov, truth = simulate_cutoff(phantom_study.dwi, 30.0, "top")
    norm, _ = normalize_intensity(cut)
    m = compute_acquired_mask(norm)
    assert np.array_equal(m.data, truth.data)


def test_acquired_mask_complete_and_empty(phantom_study):
    norm, _ = normalize_intensity(phantom_study.dwi)
    assert compute_acquired_mask(norm).data.all()
    empty = make_study_from(np.zeros((6, 6, 6, 2)))
    assert not compute_acquired_mask(empty).data.any()


def test_acquired_mask_ignores_dark_interior_slices(rng):
    data = rng.uniform(0.5, 1.0, (6, 6, 20, 1))
    data[:, :, 8:11] = 0.0
    data[:, :, 17:] = 0.0
    m = compute_acquired_mask(make_study_from(data))
    keep = m.data.any(axis=(0, 1))
    assert keep[:17].all() and not keep[17:].any()


def test_otsu_splits_two_clusters():
    t = otsu_threshold([0.0, 0.0, 0.1, 0.9, 1.0, 1.0])
    assert 0.1 <= t < 0.9


def _brain(dims, lo, hi):
    data = np.zeros(dims, bool)
    data[2:-2, 2:-2, lo:hi + 1] = True
    return Mask3D(data, (1, 1, 1), np.eye(4))


def test_thickness_example():
    brain = _brain((8, 8, 80), 10, 70)
    acquired = slice_mask(brain.grid, (61, 80))
    assert estimate_cutoff_thickness(acquired, brain) == 10.0
    assert cutoff_side(*estimate_cutoff(acquired, brain)) == "top"


def test_full_coverage_is_zero():
    brain = _brain((8, 8, 80), 10, 70)
    acquired = slice_mask(brain.grid, (0, 0))
    assert estimate_cutoff(acquired, brain) == (0.0, 0.0)
    assert cutoff_side(0.0, 0.0) == "none"


def test_both_sides_sum():
    brain = _brain((8, 8, 80), 10, 70)
    data = np.zeros((8, 8, 80), bool)
    data[:, :, 15:66] = True
    acquired = Mask3D(data, (1, 1, 1), np.eye(4))
    assert estimate_cutoff(acquired, brain) == (5.0, 5.0)
    assert cutoff_side(5.0, 5.0) == "both"


@given(st.integers(0, 70), st.integers(0, 70))
def test_thickness_monotone_in_cut(d1, d2):
    brain = _brain((6, 6, 80), 5, 74)
    a = estimate_cutoff_thickness(slice_mask(brain.grid, (80 - min(d1, d2), 80)), brain)
    b = estimate_cutoff_thickness(slice_mask(brain.grid, (80 - max(d1, d2), 80)), brain)
    assert a <= b


def test_cut_from_brain_removes_requested_depth(phantom_study):
    brain = phantom_study.phantom.brain
    lo, hi = brain_extent(brain)
    for side in ("top", "bottom"):
        cut, fov, m = cut_from_brain(phantom_study.dwi, brain, 12.0, side)
        assert estimate_cutoff_thickness(m, brain) == 12.0
        if side == "top":
            assert fov.slice_range == (hi + 1 - 12, 64)
        else:
            assert fov.slice_range == (0, lo + 12)


def test_phantom_cuts_are_recovered_within_one_slice(phantom_study):
    brain = phantom_study.phantom.brain
    for depth in (1, 7, 19, 32):
        cut, _, _ = cut_from_brain(phantom_study.dwi, brain, depth, "top")
        norm, _ = normalize_intensity(cut)
        est = estimate_cutoff_thickness(compute_acquired_mask(norm), brain)
        assert abs(est - depth) <= 1.0
