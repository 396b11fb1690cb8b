import numpy as np
import pytest

from polymerlab.core import Grid, gaussian_density, make_kernel


@pytest.fixture(scope="session")
def grid1d():
    return Grid(d=1, L=20.0, N=1024)


@pytest.fixture(scope="session")
def small_grid():
    return Grid(d=1, L=8.0, N=128)


@pytest.fixture(scope="session")
def dirac_kernel(small_grid):
    return make_kernel(small_grid, "dirac")


@pytest.fixture(scope="session")
def bump_kernel(small_grid):
    return make_kernel(small_grid, "bump", phi_width=0.5)


@pytest.fixture()
def rng():
    return np.random.default_rng(2024)


def random_density(grid, rng, modes=5):
    """Smooth random positive density for property checks."""
    ax = grid.axis()
    v = np.ones_like(ax)
    for k in range(1, modes + 1):
        v = v + rng.uniform(-0.3, 0.3) * np.cos(np.pi * k * ax / grid.L) \
              + rng.uniform(-0.3, 0.3) * np.sin(np.pi * k * ax / grid.L)
    v = (v - v.min() + 0.05) * np.exp(-(ax / (0.5 * grid.L)) ** 8)
    v /= v.sum() * grid.dx
    from polymerlab.core import DensityField

    return DensityField(grid, v)
