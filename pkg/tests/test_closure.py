import numpy as np
import pytest

from polymerlab.core import ConfigurationError, Grid, gaussian_density, make_kernel
from polymerlab import closure, rdsolver
from polymerlab.closure import closure_solve, factorization_defect
from polymerlab.shesim import SheConfig


def test_closure_solve_is_bitwise_identical_to_rd(small_grid, dirac_kernel):
    q0 = gaussian_density(small_grid, 0.5)
    cfg = rdsolver.RDConfig(grid=small_grid, kernel=dirac_kernel, beta=1.0,
                            dt=0.01, t_final=0.5, snapshot_times=(0.5,))
    a = closure_solve(cfg, q0)
    b = rdsolver.run(cfg, q0)
    assert np.array_equal(a.final.values, b.final.values)
    assert a.final.t == b.final.t


def test_closure_solve_beta_zero_is_heat(small_grid, dirac_kernel):
    from polymerlab.core import heat_propagate

    q0 = gaussian_density(small_grid, 0.5)
    cfg = rdsolver.RDConfig(grid=small_grid, kernel=dirac_kernel, beta=0.0,
                            dt=0.01, t_final=0.5)
    res = closure_solve(cfg, q0)
    assert np.abs(res.final.values - heat_propagate(q0, 0.5).values).max() < 1e-10


def test_closure_output_satisfies_flow_invariants(small_grid, dirac_kernel):
    from polymerlab import diagnostics

    q0 = gaussian_density(small_grid, 0.5)
    cfg = rdsolver.RDConfig(grid=small_grid, kernel=dirac_kernel, beta=1.0,
                            dt=0.01, t_final=1.0, diag_cadence=10)
    res = closure_solve(cfg, q0)
    s = res.series
    assert np.abs(s.column("mass") - 1).max() < 1e-10
    assert np.all(s.column("E") <= s.column("M") + 1e-12)
    assert diagnostics.check_dissipation(res.final).passed


def make_she_cfg(grid, kern, q0, beta, n=400, seed=8):
    return SheConfig(grid=grid, kernel=kern, beta=beta, dt=grid.dx**2 / 2,
                     t_final=0.5, n_real=n, seed=seed, q0=q0, threads=2)


def test_defect_zero_at_beta_zero(small_grid, bump_kernel):
    q0 = gaussian_density(small_grid, 0.25)
    cfg = make_she_cfg(small_grid, bump_kernel, q0, beta=0.0, n=16)
    d = factorization_defect(cfg, 0.5, [-0.5, 0.0, 0.5])
    assert d.defect == pytest.approx(0.0, abs=1e-16)
    assert d.scale > 0


def test_defect_grows_with_beta(small_grid, bump_kernel):
    q0 = gaussian_density(small_grid, 0.25)
    ratios = []
    for beta in (0.1, 0.3, 0.5):
        cfg = make_she_cfg(small_grid, bump_kernel, q0, beta=beta, n=600)
        d = factorization_defect(cfg, 0.5, [-0.5, 0.0, 0.5])
        assert not d.inconclusive or beta == 0.1
        ratios.append(d.ratio)
    assert ratios[0] < ratios[1] < ratios[2]


def test_defect_requires_smooth_kernel(small_grid, dirac_kernel):
    q0 = gaussian_density(small_grid, 0.25)
    cfg = make_she_cfg(small_grid, dirac_kernel, q0, beta=0.3, n=8)
    with pytest.raises(ConfigurationError):
        factorization_defect(cfg, 0.5, [0.0, 0.5])


def test_closure_vs_mc_gap_is_small_at_weak_coupling(small_grid, bump_kernel):
    q0 = gaussian_density(small_grid, 0.25)
    she = make_she_cfg(small_grid, bump_kernel, q0, beta=0.2, n=400)
    rd_cfg = rdsolver.RDConfig(grid=small_grid, kernel=bump_kernel, beta=0.2,
                               dt=2e-3, t_final=0.5, snapshot_times=(0.5,))
    gap, band = closure.closure_vs_mc(rd_cfg, she, 0.5)
    # exploratory: the closed equation tracks the annealed density up to the
    # Monte Carlo band at weak coupling
    assert gap < 20 * band + 0.05
