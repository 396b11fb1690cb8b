"""Shared numerical substrate for the endpoint-density laboratory.

Everything downstream works on a periodic box [-L, L]^d sampled at N points
per axis (N a power of two), so the heat semigroup exp(t/2 * Laplacian) is
applied exactly in Fourier space and all quadrature is the plain box rule,
which is spectrally accurate for smooth periodic data.

Conventions:
  * grid coordinates are x_i = -L + i*dx with dx = 2L/N, so x = 0 is a grid
    point and moments are measured from the center;
  * a density field stores plain samples, mass = sum(values) * dx^d;
  * spatial covariance kernels are either the lattice contact kernel
    ("dirac", d=1 only, R(0) = 1/dx) or the autocorrelation R = phi * phi~ of
    a nonnegative unit-mass mollifier phi ("bump");
  * RNG streams are derived per realization index from one master seed and
    never depend on scheduling or thread count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

# Negative values above the clamp floor are spectral ringing and get zeroed;
# anything below it is treated as a genuine positivity violation.  The floor
# is the more permissive of an absolute window and a relative one, because
# FFT rounding scales with field magnitude and transform size.
CLAMP_FLOOR = -1e-14
CLAMP_REL = 1e-13
# Default tolerance on |mass - 1| for fields flagged as normalized.
MASS_TOL = 1e-8
# Default boundary-leakage budget (mass within dx of the box edge).
LEAKAGE_TOL = 1e-10


class ConfigurationError(ValueError):
    """A grid/kernel/run parameter violates a documented precondition."""


class InvariantViolation(RuntimeError):
    """A runtime invariant (positivity, leakage, overflow) was breached."""


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid on [-L, L]^d with N points per axis."""

    d: int
    L: float
    N: int

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise ConfigurationError(f"dimension must be 1, 2 or 3, got {self.d}")
        if self.N < 16 or not _is_power_of_two(self.N):
            raise ConfigurationError(f"N must be a power of two >= 16, got {self.N}")
        if not (self.L > 0):
            raise ConfigurationError(f"half-width L must be positive, got {self.L}")

    @property
    def dx(self) -> float:
        return 2.0 * self.L / self.N

    @property
    def shape(self) -> tuple:
        return (self.N,) * self.d

    @property
    def cell_volume(self) -> float:
        return self.dx**self.d

    def axis(self) -> np.ndarray:
        """Coordinates along one axis; x=0 sits exactly on the grid."""
        return -self.L + self.dx * np.arange(self.N)

    def radius_sq(self) -> np.ndarray:
        """|x|^2 at every grid point, shape (N,)*d."""
        ax2 = self.axis() ** 2
        if self.d == 1:
            return ax2
        grids = np.ix_(*([ax2] * self.d))
        out = np.zeros(self.shape)
        for g in grids:
            out = out + g
        return out

    def rfft_ksq(self) -> np.ndarray:
        """|k|^2 on the rfftn output layout (last axis halved)."""
        return _rfft_ksq_cached(self.d, self.N, self.dx)


@lru_cache(maxsize=64)
def _rfft_ksq_cached(d: int, N: int, dx: float) -> np.ndarray:
    kfull = 2.0 * np.pi * np.fft.fftfreq(N, d=dx)
    khalf = 2.0 * np.pi * np.fft.rfftfreq(N, d=dx)
    axes = [kfull**2] * (d - 1) + [khalf**2]
    if d == 1:
        return axes[0]
    out = np.zeros(tuple(len(a) for a in axes))
    for g in np.ix_(*axes):
        out = out + g
    return out


@lru_cache(maxsize=256)
def _heat_multiplier(d: int, N: int, dx: float, dt: float) -> np.ndarray:
    ksq = _rfft_ksq_cached(d, N, dx)
    return np.exp(-0.5 * dt * ksq)


@dataclass
class DensityField:
    """Nonnegative samples of a density on a Grid at time t.

    clamped_mass records how much (negative) ringing mass was zeroed by the
    operation that produced this field; it is diagnostic, not cumulative.
    """

    grid: Grid
    values: np.ndarray
    t: float = 0.0
    clamped_mass: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise ConfigurationError(
                f"values shape {self.values.shape} != grid shape {self.grid.shape}"
            )

    def mass(self) -> float:
        return float(self.values.sum() * self.grid.cell_volume)

    def is_normalized(self, tol: float = MASS_TOL) -> bool:
        return abs(self.mass() - 1.0) <= tol

    def min_value(self) -> float:
        return float(self.values.min())

    def boundary_leakage(self) -> float:
        """Mass sitting within dx of the box edge (periodic seam monitor)."""
        v = self.values
        g = self.grid
        edge = np.zeros(g.shape, dtype=bool)
        for ax in range(g.d):
            idx = [slice(None)] * g.d
            for j in (0, 1, g.N - 1):
                idx[ax] = j
                edge[tuple(idx)] = True
        return float(v[edge].sum() * g.cell_volume)


def clamp_ringing(values: np.ndarray) -> tuple[np.ndarray, float]:
    """Zero ringing negatives; raise if anything sits below the clamp floor.

    Returns the cleaned array and the (positive) amount of value-sum that was
    removed; multiply by cell volume for actual mass.
    """
    mn = values.min()
    if mn >= 0.0:
        return values, 0.0
    floor = min(CLAMP_FLOOR, -CLAMP_REL * float(values.max()))
    if mn < floor:
        raise InvariantViolation(
            f"negative value {mn:.3e} below ringing floor {floor:.3e}"
        )
    neg = values < 0.0
    removed = float(-values[neg].sum())
    values = values.copy()
    values[neg] = 0.0
    return values, removed


def heat_kernel(t: float, x, d: int = 1) -> float:
    """Heat kernel of d_t - Laplacian/2: (2*pi*t)^(-d/2) exp(-|x|^2/(2t))."""
    if t <= 0:
        raise ValueError(f"heat kernel needs t > 0, got t={t}")
    x = np.asarray(x, dtype=float)
    if d == 1 or x.ndim == 0:
        rsq = x**2
    else:
        rsq = (x**2).sum(axis=-1)
    return (2.0 * np.pi * t) ** (-d / 2.0) * np.exp(-rsq / (2.0 * t))


def spectral_heat(values: np.ndarray, grid: Grid, dt: float) -> np.ndarray:
    """Exact periodic heat flow for time dt; the k=0 mode is untouched."""
    if dt == 0.0:
        return values.copy()
    mult = _heat_multiplier(grid.d, grid.N, grid.dx, dt)
    if grid.d == 1:
        return np.fft.irfft(np.fft.rfft(values) * mult, n=grid.N)
    axes = tuple(range(grid.d))
    return np.fft.irfftn(np.fft.rfftn(values) * mult, s=grid.shape, axes=axes)


def heat_propagate(f: DensityField, dt: float) -> DensityField:
    """Propagate a density by the exact spectral heat semigroup.

    Mass is conserved to rounding; ringing negatives above CLAMP_FLOOR are
    zeroed and accounted in clamped_mass.
    """
    if dt < 0:
        raise ValueError(f"dt must be >= 0, got {dt}")
    out = spectral_heat(f.values, f.grid, dt)
    out, removed = clamp_ringing(out)
    return DensityField(f.grid, out, t=f.t + dt, clamped_mass=removed * f.grid.cell_volume)


def spectral_gradient(values: np.ndarray, grid: Grid, axis: int = 0) -> np.ndarray:
    """Spectral first derivative along one axis (Nyquist mode zeroed)."""
    N = grid.N
    k = 2.0 * np.pi * np.fft.fftfreq(N, d=grid.dx)
    k[N // 2] = 0.0  # odd derivative: drop the unpaired Nyquist mode
    if grid.d == 1:
        return np.fft.ifft(np.fft.fft(values) * 1j * k).real
    shape = [1] * grid.d
    shape[axis] = N
    return np.fft.ifftn(np.fft.fftn(values) * (1j * k).reshape(shape)).real


# ---------------------------------------------------------------------------
# covariance kernels
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CovarianceKernel:
    """Spatial covariance R of the environment plus its mollifier phi.

    For the "bump" variant R is the discrete autocorrelation of phi and the
    rfft of R is kept for O(N log N) convolutions.  The "dirac" variant is the
    lattice contact kernel: R(0) = 1/dx, R * g = g.

    R is stored in lag layout: R[m] is the covariance at displacement m*dx
    taken periodically (so R[0] = R(0) and R[N-m] = R(-m*dx)); phi uses the
    grid's centered axis layout.
    """

    variant: str
    grid: Grid
    width: float | None
    phi: np.ndarray | None
    R: np.ndarray
    R0: float
    phi_hat: np.ndarray | None = field(repr=False, default=None)
    R_hat: np.ndarray | None = field(repr=False, default=None)

    @property
    def kernel_id(self) -> str:
        if self.variant == "dirac":
            return "dirac"
        return f"bump(w={self.width:g})"

    def convolve(self, values: np.ndarray) -> np.ndarray:
        """R * values on the periodic grid."""
        if self.variant == "dirac":
            return values
        g = self.grid
        if g.d == 1:
            return np.fft.irfft(np.fft.rfft(values) * self.R_hat, n=g.N) * g.cell_volume
        axes = tuple(range(g.d))
        return np.fft.irfftn(
            np.fft.rfftn(values) * self.R_hat, s=g.shape, axes=axes
        ) * g.cell_volume

    def mollify(self, values: np.ndarray) -> np.ndarray:
        """phi * values (identity for the contact kernel)."""
        if self.variant == "dirac":
            return values
        g = self.grid
        if g.d == 1:
            return np.fft.irfft(np.fft.rfft(values) * self.phi_hat, n=g.N) * g.cell_volume
        axes = tuple(range(g.d))
        return np.fft.irfftn(
            np.fft.rfftn(values) * self.phi_hat, s=g.shape, axes=axes
        ) * g.cell_volume


def mollifier_profile(r: np.ndarray, width: float, family: str = "bump") -> np.ndarray:
    """Unnormalized compactly supported profile of support radius `width`."""
    r = np.asarray(r, dtype=float)
    if family == "bump":
        out = np.zeros_like(r)
        inside = np.abs(r) < width
        s = r[inside] / width
        out[inside] = np.exp(-1.0 / (1.0 - s * s))
        return out
    if family == "box":
        return (np.abs(r) <= width / 2.0).astype(float)
    raise ConfigurationError(f"unknown mollifier family {family!r}")


def make_kernel(
    grid: Grid,
    variant: str = "bump",
    phi_width: float | None = None,
    family: str = "bump",
) -> CovarianceKernel:
    """Build a covariance kernel on the grid.

    For the bump variant phi is sampled, normalized to unit discrete mass, and
    R is computed spectrally as the autocorrelation of phi (R_hat = |phi_hat|^2
    up to the lattice measure), which makes R even and int R = (int phi)^2 = 1
    by construction.
    """
    if variant == "dirac":
        if grid.d != 1:
            raise ConfigurationError("the contact (dirac) kernel is restricted to d=1")
        R = np.zeros(grid.shape)
        R[0] = 1.0 / grid.cell_volume
        return CovarianceKernel(
            variant="dirac", grid=grid, width=None, phi=None, R=R,
            R0=1.0 / grid.cell_volume,
        )
    if variant != "bump":
        raise ConfigurationError(f"unknown kernel variant {variant!r}")
    if phi_width is None:
        raise ConfigurationError("bump kernel needs phi_width")
    w = float(phi_width)
    # box family: `width` is the support diameter, bump family: the radius
    support_radius = w if family == "bump" else w / 2.0
    if support_radius > grid.L / 2.0:
        raise ConfigurationError(
            f"mollifier support radius {support_radius:g} exceeds half the domain "
            f"(L/2 = {grid.L / 2.0:g})"
        )
    if grid.d == 1:
        r = grid.axis()
        phi = mollifier_profile(r, w, family)
    else:
        rsq = grid.radius_sq()
        phi = mollifier_profile(np.sqrt(rsq), w, family)
    m = phi.sum() * grid.cell_volume
    if m <= 0:
        raise ConfigurationError("mollifier has no mass on this grid")
    phi = phi / m
    if grid.d == 1:
        phi_hat = np.fft.rfft(phi)
    else:
        phi_hat = np.fft.rfftn(phi)
    # autocorrelation: R(x) = sum_y phi(x+y) phi(y) dx^d  <->  R_hat = |phi_hat|^2 dx^d
    R_hat = (phi_hat * np.conj(phi_hat)).real * grid.cell_volume
    if grid.d == 1:
        R = np.fft.irfft(R_hat, n=grid.N)
    else:
        R = np.fft.irfftn(R_hat, s=grid.shape, axes=tuple(range(grid.d)))
    # symmetrize away FFT rounding so evenness holds bitwise
    R = 0.5 * (R + _reflect(R))
    return CovarianceKernel(
        variant="bump", grid=grid, width=w, phi=phi, R=R, R0=float(R[(0,) * grid.d]),
        phi_hat=phi_hat, R_hat=R_hat,
    )


def _reflect(values: np.ndarray) -> np.ndarray:
    """Samples of x -> f(-x) on the periodic grid (index j -> (N-j) mod N)."""
    out = values
    for ax in range(values.ndim):
        out = np.flip(np.roll(out, -1, axis=ax), axis=ax)
    return out


# ---------------------------------------------------------------------------
# initial data
# ---------------------------------------------------------------------------


def gaussian_density(grid: Grid, sigma: float, center: float = 0.0) -> DensityField:
    """Normalized Gaussian samples; sigma >= 3 dx keeps the spectrum clean."""
    if grid.d == 1:
        rsq = (grid.axis() - center) ** 2
    else:
        ax = grid.axis() - center
        rsq = np.zeros(grid.shape)
        for g in np.ix_(*([ax**2] * grid.d)):
            rsq = rsq + g
    v = np.exp(-rsq / (2.0 * sigma**2))
    v /= v.sum() * grid.cell_volume
    return DensityField(grid, v, t=0.0)


def bump_density(grid: Grid, width: float, center: float = 0.0) -> DensityField:
    """Normalized compact mollifier bump of support radius `width`."""
    if grid.d == 1:
        r = np.abs(grid.axis() - center)
    else:
        ax = grid.axis() - center
        rsq = np.zeros(grid.shape)
        for g in np.ix_(*([ax**2] * grid.d)):
            rsq = rsq + g
        r = np.sqrt(rsq)
    v = mollifier_profile(r, width, "bump")
    m = v.sum() * grid.cell_volume
    if m <= 0:
        raise ConfigurationError("bump width too small for this grid")
    return DensityField(grid, v / m, t=0.0)


def delta_bump(grid: Grid, width_cells: float = 4.0) -> DensityField:
    """Stand-in for point-mass initial data: Gaussian of std width_cells*dx.

    A genuinely compact profile this narrow cannot be sampled cleanly, so the
    delta surrogate uses a Gaussian, whose spectrum is below rounding at the
    Nyquist mode once the std reaches ~3 cells.
    """
    return gaussian_density(grid, sigma=width_cells * grid.dx)


# ---------------------------------------------------------------------------
# reproducible RNG streams
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RngPlan:
    """Derives one independent substream per realization index.

    The stream for (seed, index) is a pure function of those two integers, so
    draws are bit-identical no matter in which order or on which thread the
    realizations run.
    """

    seed: int

    def stream(self, index: int) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(index,))
        return np.random.Generator(np.random.PCG64(ss))


def box_mass(values: np.ndarray, grid: Grid) -> float:
    return float(values.sum() * grid.cell_volume)
