"""Monte Carlo for the stochastic heat equation with multiplicative noise,

    d_t u = 1/2 Lap u + beta u xi,   u(0) = q0,

discretized by an exponential-Euler (geometric) step: each cell is multiplied
by exp(beta dW - beta^2 R(0) dt / 2) with dW the (mollified) lattice noise
increment, then the exact spectral heat semigroup is applied.  The Gaussian
moment generating function makes the multiplier mean-one, so E[u] follows the
heat flow exactly and positivity is preserved by construction.

The quenched endpoint density of one realization is q = u / int u; annealed
n-point densities are Monte Carlo averages of products q(x_1)...q(x_n) over
independent noise realizations, one RNG substream per realization index.

Lattice noise convention: white increments are iid N(0, dt/dx^d) per cell;
the mollified increment phi * xi * dx^d then has covariance dt * R(x - y)
with R the discrete autocorrelation of phi, and the contact kernel (d=1)
uses the white increments directly with R(0) = 1/dx.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import (
    ConfigurationError,
    CovarianceKernel,
    DensityField,
    Grid,
    RngPlan,
    spectral_heat,
)

UNDERFLOW_FLOOR = 1e-280
PARALLEL_BLOCK = 8  # fixed work-block size so results never depend on threads


class RealizationDiscarded(RuntimeError):
    """One noise realization was dropped (overflow/underflow/positivity)."""


@dataclass
class SheConfig:
    grid: Grid
    kernel: CovarianceKernel
    beta: float
    dt: float
    t_final: float
    n_real: int
    seed: int
    q0: DensityField
    threads: int = 1

    def __post_init__(self):
        if self.kernel.variant == "dirac" and self.grid.d != 1:
            raise ConfigurationError("the contact (dirac) kernel is restricted to d=1")
        if self.kernel.grid != self.grid or self.q0.grid != self.grid:
            raise ConfigurationError("kernel/q0 grid mismatch")
        lim = self.grid.dx**2 / 2.0
        if self.dt > lim * (1 + 1e-12):
            raise ConfigurationError(
                f"dt = {self.dt:g} exceeds the noise stability budget dx^2/2 = {lim:g}"
            )
        if self.n_real < 2:
            raise ConfigurationError("need at least 2 realizations")
        if self.beta < 0:
            raise ConfigurationError("beta must be >= 0")

    def rng_plan(self) -> RngPlan:
        return RngPlan(self.seed)


@dataclass
class McEstimate:
    """Monte Carlo mean with its standard error over n realizations."""

    mean: float
    stderr: float
    n: int
    low_confidence: bool = False

    @classmethod
    def from_samples(cls, samples: np.ndarray, min_n: int = 100) -> "McEstimate":
        samples = np.asarray(samples, dtype=float)
        n = samples.size
        if n < 2:
            raise ValueError("an estimate needs at least 2 samples")
        return cls(
            mean=float(samples.mean()),
            stderr=float(samples.std(ddof=1) / math.sqrt(n)),
            n=n,
            low_confidence=n < min_n,
        )


def estimate_columns(rows: np.ndarray, min_n: int = 100) -> list[McEstimate]:
    return [McEstimate.from_samples(rows[:, j], min_n) for j in range(rows.shape[1])]


# ---------------------------------------------------------------------------
# single-realization dynamics
# ---------------------------------------------------------------------------


def noise_increment(
    rng: np.random.Generator, grid: Grid, kernel: CovarianceKernel, dt: float
) -> np.ndarray:
    """One mollified spacetime-noise increment with Var = R(0) dt per cell."""
    white = rng.standard_normal(grid.shape) * math.sqrt(dt / grid.cell_volume)
    if kernel.variant == "dirac":
        return white
    return kernel.mollify(white)


def she_step(
    u: np.ndarray,
    dW: np.ndarray,
    beta: float,
    dt: float,
    kernel: CovarianceKernel,
    grid: Grid,
) -> np.ndarray:
    """Exponential-Euler noise multiplier followed by exact diffusion.

    The lognormal multiplier is positive and mean-one, so E[u] follows the
    heat flow exactly.  The spectral diffusion of a rough field can ring at
    the e^{-pi^2 dt/(2 dx^2)} level around sharp noise peaks, so far-tail
    cells may carry sub-ring negative values; the bulk stays positive and
    nothing downstream depends on tail signs.
    """
    v = u * np.exp(beta * dW - 0.5 * beta**2 * kernel.R0 * dt)
    v = spectral_heat(v, grid, dt)
    top = float(v.max())
    if not math.isfinite(top):
        raise RealizationDiscarded("noise multiplier overflowed")
    return v


def _segment_schedule(capture_times, dt: float, t_final: float):
    """(h, n_steps) per segment so every capture time is hit exactly."""
    times = sorted(set(float(t) for t in capture_times) | {float(t_final)})
    if times[0] <= 0:
        raise ConfigurationError("capture times must be positive")
    if times[-1] > t_final + 1e-12:
        raise ConfigurationError("capture time beyond t_final")
    segs = []
    prev = 0.0
    for t in times:
        span = t - prev
        n = max(1, int(math.ceil(span / dt - 1e-9)))
        segs.append((t, span / n, n))
        prev = t
    return segs


def simulate(cfg: SheConfig, index: int, capture_times) -> list[np.ndarray]:
    """Evolve one realization, returning u at each capture time (sorted).

    The number and order of RNG draws depend only on the schedule, so the
    realization is a pure function of (seed, index).
    """
    rng = cfg.rng_plan().stream(index)
    u = cfg.q0.values.copy()
    captured = []
    for _, h, n in _segment_schedule(capture_times, cfg.dt, cfg.t_final):
        for _ in range(n):
            dW = noise_increment(rng, cfg.grid, cfg.kernel, h)
            u = she_step(u, dW, cfg.beta, h, cfg.kernel, cfg.grid)
        captured.append(u.copy())
    return captured


def simulate_block_1d(
    cfg: SheConfig, indices, capture_times, antithetic: bool = False
) -> list[np.ndarray]:
    """Evolve a block of d=1 realizations side by side (one row each).

    Each index keeps its own RNG substream and consumes draws in the same
    (step, cell) order as `simulate`, so the trajectories are pure functions
    of (seed, index); batching only amortizes FFT and exp calls.  Returns one
    (block, N) array per capture time.  With antithetic=True each index also
    evolves the sign-flipped noise path and the arrays have 2*block rows
    (originals first, mirrored partners after).
    """
    grid, kern = cfg.grid, cfg.kernel
    plan = cfg.rng_plan()
    rngs = [plan.stream(i) for i in indices]
    B = len(indices)
    rows = 2 * B if antithetic else B
    u = np.broadcast_to(cfg.q0.values, (rows, grid.N)).copy()
    vol = grid.cell_volume
    from .core import _heat_multiplier

    captured = []
    for _, h, n in _segment_schedule(capture_times, cfg.dt, cfg.t_final):
        scale = math.sqrt(h / vol)
        white = np.stack([r.standard_normal((n, grid.N)) for r in rngs])
        white *= scale
        if kern.variant == "bump":
            dW = np.fft.irfft(np.fft.rfft(white, axis=-1) * kern.phi_hat, n=grid.N, axis=-1)
            dW *= vol
        else:
            dW = white
        if antithetic:
            dW = np.concatenate([dW, -dW], axis=0)
        comp = 0.5 * cfg.beta**2 * kern.R0 * h
        mult = _heat_multiplier(grid.d, grid.N, grid.dx, h)
        for k in range(n):
            u = u * np.exp(cfg.beta * dW[:, k, :] - comp)
            u = np.fft.irfft(np.fft.rfft(u, axis=-1) * mult, n=grid.N, axis=-1)
        captured.append(u.copy())
    return captured


def endpoint_density(u: np.ndarray, grid: Grid) -> np.ndarray:
    """Quenched endpoint density q = u / int u; discards degenerate masses."""
    z = float(u.sum() * grid.cell_volume)
    if not math.isfinite(z) or z <= UNDERFLOW_FLOOR:
        raise RealizationDiscarded(f"partition mass underflow ({z:.3e})")
    return u / z


def endpoint_field(u_field: DensityField) -> DensityField:
    q = endpoint_density(u_field.values, u_field.grid)
    return DensityField(u_field.grid, q, t=u_field.t)


# ---------------------------------------------------------------------------
# ensemble drivers (deterministic under any thread count)
# ---------------------------------------------------------------------------


def parallel_index_map(n: int, fn, threads: int = 1):
    """Apply fn(i) for i in range(n); results land in index order.

    Work is cut into fixed-size blocks regardless of thread count and every
    row is a pure function of its index, so the output is scheduling-free.
    Returns (results, discards) where discards maps index -> reason.
    """
    results = [None] * n
    discards: dict[int, str] = {}

    def block(lo: int, hi: int):
        for i in range(lo, hi):
            try:
                results[i] = fn(i)
            except RealizationDiscarded as exc:
                discards[i] = str(exc)

    if threads and threads > 1:
        ranges = [
            (lo, min(lo + PARALLEL_BLOCK, n)) for lo in range(0, n, PARALLEL_BLOCK)
        ]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda r: block(*r), ranges))
    else:
        block(0, n)
    return results, discards


def ensemble_rows(
    cfg: SheConfig, capture_times, row_fn, antithetic: bool = False
) -> tuple[np.ndarray, dict]:
    """Per-realization row vectors row_fn(list-of-u-fields), stacked by index.

    With antithetic=True (d=1 only) each index contributes the average of its
    row and the row of the sign-flipped noise path, which cancels the leading
    odd-order noise fluctuation of smooth functionals.
    """
    if antithetic and cfg.grid.d != 1:
        raise ConfigurationError("antithetic pairs are implemented for d=1")
    n = cfg.n_real
    results = [None] * n
    discards: dict[int, str] = {}

    def block(lo: int, hi: int):
        idx = list(range(lo, hi))
        if cfg.grid.d == 1:
            captures = simulate_block_1d(cfg, idx, capture_times, antithetic)
            per_real = lambda b: [c[b] for c in captures]
        else:
            sims = [simulate(cfg, i, capture_times) for i in idx]
            per_real = lambda b: sims[b]
        B = len(idx)
        for b, i in enumerate(idx):
            try:
                fields = per_real(b)
                if not np.isfinite(fields[-1]).all():
                    raise RealizationDiscarded("field overflowed")
                row = np.asarray(row_fn(fields), dtype=float)
                if antithetic:
                    mirror = per_real(b + B)
                    if not np.isfinite(mirror[-1]).all():
                        raise RealizationDiscarded("mirrored field overflowed")
                    row = 0.5 * (row + np.asarray(row_fn(mirror), dtype=float))
                results[i] = row
            except RealizationDiscarded as exc:
                discards[i] = str(exc)

    ranges = [(lo, min(lo + PARALLEL_BLOCK, n)) for lo in range(0, n, PARALLEL_BLOCK)]
    if cfg.threads and cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            list(pool.map(lambda r: block(*r), ranges))
    else:
        for r in ranges:
            block(*r)
    rows = [r for r in results if r is not None]
    if not rows:
        raise RealizationDiscarded("all realizations discarded")
    return np.vstack(rows), discards


def ensemble_field_sums(
    cfg: SheConfig, capture_times, transform: str = "q"
) -> tuple[list[np.ndarray], int, dict]:
    """Sum of per-realization fields at each capture time (index-ordered).

    transform: "u" for raw fields, "q" for normalized endpoint densities.
    Partial sums are accumulated per fixed block and reduced in block order,
    so the result does not depend on the thread count.
    """
    times = sorted(set(float(t) for t in capture_times))
    nblocks = (cfg.n_real + PARALLEL_BLOCK - 1) // PARALLEL_BLOCK
    partials = [None] * nblocks
    counts = [0] * nblocks
    discards: dict[int, str] = {}

    def block(b: int):
        lo = b * PARALLEL_BLOCK
        hi = min(lo + PARALLEL_BLOCK, cfg.n_real)
        acc = [np.zeros(cfg.grid.shape) for _ in times]
        got = 0
        for i in range(lo, hi):
            try:
                fields = simulate(cfg, i, times)
                for a, u in zip(acc, fields):
                    a += endpoint_density(u, cfg.grid) if transform == "q" else u
                got += 1
            except RealizationDiscarded as exc:
                discards[i] = str(exc)
        partials[b] = acc
        counts[b] = got

    if cfg.threads and cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            list(pool.map(block, range(nblocks)))
    else:
        for b in range(nblocks):
            block(b)
    sums = [np.zeros(cfg.grid.shape) for _ in times]
    for acc in partials:
        for s, a in zip(sums, acc):
            s += a
    return sums, sum(counts), discards


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------


def snap_probe(grid: Grid, x) -> float:
    """Nearest grid coordinate to x (CLI convenience; ops demand exactness)."""
    j = int(round((float(x) + grid.L) / grid.dx)) % grid.N
    return -grid.L + j * grid.dx


def probe_index(grid: Grid, x) -> tuple:
    """Grid index of a probe point; the point must lie on the grid."""
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    if xs.size != grid.d:
        raise ConfigurationError(f"probe {x!r} has wrong dimension for d={grid.d}")
    idx = []
    for c in xs:
        j = int(round((c + grid.L) / grid.dx))
        if abs(-grid.L + j * grid.dx - c) > 1e-9 * max(1.0, grid.L):
            raise ConfigurationError(f"probe coordinate {c} is not a grid point")
        idx.append(j % grid.N)
    return tuple(idx)


def estimate_qn(
    cfg: SheConfig, n: int, points, T: float
) -> tuple[list[McEstimate], dict]:
    """Annealed n-point density estimates E[q(T,x_1)...q(T,x_n)] per point.

    Each point is an n-tuple of grid locations; products are taken per
    realization and averaged, so permuting a tuple reproduces the identical
    estimate bitwise.
    """
    if not 1 <= n <= 3:
        raise ConfigurationError("n must be 1, 2 or 3")
    tuples = []
    for pt in points:
        coords = (pt,) if n == 1 and np.isscalar(pt) else tuple(pt)
        if len(coords) != n:
            raise ConfigurationError(f"point {pt!r} is not an {n}-tuple")
        tuples.append(tuple(probe_index(cfg.grid, c) for c in coords))

    def row(fields):
        q = endpoint_density(fields[-1], cfg.grid)
        return [np.prod([q[ij] for ij in tup]) for tup in tuples]

    rows, discards = ensemble_rows(cfg, [T], row)
    return estimate_columns(rows), discards


def estimate_u_products(
    cfg: SheConfig, pairs, T: float
) -> tuple[list[McEstimate], dict]:
    """Unnormalized pair moments E[u(T,x) u(T,y)] at the given pairs."""
    idx = [(probe_index(cfg.grid, x), probe_index(cfg.grid, y)) for x, y in pairs]

    def row(fields):
        u = fields[-1]
        return [u[i] * u[j] for i, j in idx]

    rows, discards = ensemble_rows(cfg, [T], row)
    return estimate_columns(rows), discards


def mean_field_estimates(
    cfg: SheConfig, T: float, probes
) -> tuple[list[McEstimate], McEstimate, dict]:
    """E[u(T, x)] at probes plus E[int u(T)], from one ensemble."""
    idx = [probe_index(cfg.grid, x) for x in probes]
    vol = cfg.grid.cell_volume

    def row(fields):
        u = fields[-1]
        return [u[i] for i in idx] + [u.sum() * vol]

    rows, discards = ensemble_rows(cfg, [T], row)
    ests = estimate_columns(rows)
    return ests[:-1], ests[-1], discards


# ---------------------------------------------------------------------------
# deterministic pair-moment PDE (oracle for E[u u])
# ---------------------------------------------------------------------------


def pair_moment_solve(
    grid: Grid, kernel: CovarianceKernel, beta: float, q0: DensityField,
    T: float, dt: float,
) -> np.ndarray:
    """Solve the closed pair-moment equation on the (x, y) grid in d=1:

        d_t V = 1/2 (Vxx + Vyy) + beta^2 R(x - y) V,  V(0) = q0 (x) q0(y).

    Strang splitting with the exact potential multiplier; second order, used
    as the deterministic oracle for Monte Carlo E[u(x) u(y)].
    """
    if grid.d != 1:
        raise ConfigurationError("pair-moment solve is for d=1 fields")
    N = grid.N
    j = np.arange(N)
    Rmat = kernel.R[(j[:, None] - j[None, :]) % N]
    V = np.outer(q0.values, q0.values)
    kx = 2.0 * np.pi * np.fft.fftfreq(N, d=grid.dx)
    ky = 2.0 * np.pi * np.fft.rfftfreq(N, d=grid.dx)
    lap = kx[:, None] ** 2 + ky[None, :] ** 2
    n = max(1, int(math.ceil(T / dt - 1e-9)))
    h = T / n
    half_pot = np.exp(0.5 * beta**2 * Rmat * h)
    heat = np.exp(-0.5 * h * lap)
    for _ in range(n):
        V = V * half_pot
        V = np.fft.irfft2(np.fft.rfft2(V) * heat, s=(N, N))
        V = V * half_pot
    return V


# ---------------------------------------------------------------------------
# mollification convergence study (coupled noise across widths)
# ---------------------------------------------------------------------------


@dataclass
class MollificationResult:
    widths: list
    probes: list
    diffs: list          # per adjacent width pair: list of McEstimate (squared diff)
    ratio_flags: list    # True where the Cauchy decrease fails beyond 2 stderr
    moment_C: float
    moment_reports: list = field(default_factory=list)


def mollification_study(
    grid: Grid,
    beta: float,
    widths,
    T: float,
    probes,
    n_real: int,
    seed: int,
    dt: float,
    q0: DensityField,
    threads: int = 1,
) -> MollificationResult:
    """Couple one white-noise lattice across mollifier widths and measure
    the Monte Carlo L2 differences of the endpoint densities at probes.

    The same standard-normal draws drive every width (and differ only through
    phi_eps), so successive differences form a Cauchy-style convergence table.
    Also fits the constant in E[q^2] <= C (G_T * q0)^2 at the first probe and
    reports the ratio at the others.
    """
    if grid.d != 1:
        raise ConfigurationError("mollification study is for d=1")
    widths = sorted(float(w) for w in widths)[::-1]
    kernels = [make_bump(grid, w) for w in widths]
    idx = [probe_index(grid, x) for x in probes]
    plan = RngPlan(seed)
    segs = _segment_schedule([T], dt, T)
    vol = grid.cell_volume

    def one(i: int) -> np.ndarray:
        rng = plan.stream(i)
        us = [q0.values.copy() for _ in widths]
        for _, h, nst in segs:
            for _ in range(nst):
                white = rng.standard_normal(grid.shape) * math.sqrt(h / vol)
                for w, kern in enumerate(kernels):
                    dW = kern.mollify(white)
                    us[w] = she_step(us[w], dW, beta, h, kern, grid)
        qs = [endpoint_density(u, grid) for u in us]
        out = []
        for a in range(len(widths) - 1):
            out.extend((qs[a][j] - qs[a + 1][j]) ** 2 for j in idx)
        out.extend(qs[-1][j] ** 2 for j in idx)  # finest-level q^2 for the bound
        return np.array(out)

    results, discards = parallel_index_map(n_real, one, threads)
    rows = np.vstack([r for r in results if r is not None])
    k = len(idx)
    diffs = []
    for a in range(len(widths) - 1):
        diffs.append(estimate_columns(rows[:, a * k : (a + 1) * k]))
    qsq = estimate_columns(rows[:, (len(widths) - 1) * k :])

    flags = []
    for a in range(len(diffs) - 1):
        for j in range(k):
            hi, lo = diffs[a][j], diffs[a + 1][j]
            decreasing = lo.mean < hi.mean - 2.0 * math.hypot(lo.stderr, hi.stderr)
            flags.append(not decreasing)

    mean_u = spectral_heat(q0.values, grid, T)  # E[u] follows the heat flow
    c0 = qsq[0].mean / mean_u[idx[0]] ** 2
    reports = []
    for j in range(1, k):
        bound = c0 * mean_u[idx[j]] ** 2
        reports.append((probes[j], qsq[j].mean, qsq[j].stderr, bound))
    return MollificationResult(
        widths=widths, probes=list(probes), diffs=diffs, ratio_flags=flags,
        moment_C=float(c0), moment_reports=reports,
    )


def make_bump(grid: Grid, width: float) -> CovarianceKernel:
    from .core import make_kernel

    return make_kernel(grid, "bump", phi_width=width)
