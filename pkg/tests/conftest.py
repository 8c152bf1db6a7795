import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fovx.core import GradientTable, Volume3D, Volume4D
from fovx.phantom import PhantomSpec, default_gradient_table, make_study

settings.register_profile("fovx", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("fovx")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_affine(rng, spacing=(1.0, 1.0, 1.0)):
    affine = np.diag([*spacing, 1.0])
    affine[:3, 3] = rng.uniform(-50, 50, 3)
    return affine


@pytest.fixture
def small_table():
    return GradientTable([0, 1300, 1300], [[0, 0, 0], [1, 0, 0], [0, 1, 0]])


@pytest.fixture(scope="session")
def phantom_study():
    """Noisy 64^3 phantom with 1 b0 + 40 directions."""
    return make_study(PhantomSpec(seed=11))


@pytest.fixture(scope="session")
def small_phantom_study():
    """Reduced phantom (32^3, 1 b0 + 6 directions) for quick pipeline tests."""
    spec = PhantomSpec(dims=(32, 32, 32), semi_axes_mm=(11.0, 12.0, 11.5), csf_thickness_mm=1.5,
                       gm_thickness_mm=2.0, tract_radius_mm=2.0, center_jitter_mm=0.5, seed=5)
    return make_study(spec, default_gradient_table(6))


def make_volume(data, spacing=(1.0, 1.0, 1.0), affine=None):
    return Volume3D(np.asarray(data, np.float32), spacing,
                    np.diag([*spacing, 1.0]) if affine is None else affine)


def make_study_from(data, table=None, spacing=(1.0, 1.0, 1.0)):
    return Volume4D(np.asarray(data, np.float32), spacing, np.diag([*spacing, 1.0]), table)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
