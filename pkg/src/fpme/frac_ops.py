"""Fractional Laplacian powers, seminorms, Riesz potentials and cut-off fields.

Two discretizations of ``(-Δ)^σ`` are provided on a periodic lattice:

* ``"spectral"``: the Fourier multiplier ``|k|^{2σ}``.
* ``"quadrature"``: the hypersingular integral with the ``C_{d,σ}``
  normalization, summed on the lattice with the kernel periodized over all
  images and a first-order correction for the removed singular cell.

For compactly supported fields the quadrature can also be run in free space
(``exterior=0.0``), or in 1D with a prescribed far field (``exterior=callable``).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Callable

import mpmath
import numpy as np
from scipy import integrate, special
from scipy.interpolate import RegularGridInterpolator
from scipy.signal import fftconvolve

from .report import DiagnosticsReport, le, between

METHODS = ("spectral", "quadrature")


@dataclass(frozen=True)
class Grid:
    """Uniform periodic lattice on ``[-L, L)^d`` with ``n`` points per axis.

    Node ``j`` sits at ``-L + j h`` so the origin is the node ``n // 2``.
    """

    d: int
    n: int
    L: float

    def __post_init__(self):
        if self.d not in (1, 2):
            raise ValueError(f"dimension must be 1 or 2, got {self.d}")
        if self.n < 8 or self.n & (self.n - 1):
            raise ValueError(f"points per axis must be a power of two >= 8, got {self.n}")
        if not (self.L > 0 and np.isfinite(self.L)):
            raise ValueError(f"half-extent must be positive, got {self.L}")
        object.__setattr__(self, "L", float(self.L))

    @property
    def h(self) -> float:
        return 2.0 * self.L / self.n

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.d

    @property
    def cell_volume(self) -> float:
        return self.h ** self.d

    @property
    def origin_index(self) -> tuple[int, ...]:
        return (self.n // 2,) * self.d

    @cached_property
    def axis(self) -> np.ndarray:
        return -self.L + self.h * np.arange(self.n)

    @cached_property
    def coords(self) -> tuple[np.ndarray, ...]:
        return tuple(np.meshgrid(*([self.axis] * self.d), indexing="ij"))

    @cached_property
    def points(self) -> np.ndarray:
        """Node coordinates as an ``(N, d)`` array in C order."""
        return np.stack([c.ravel() for c in self.coords], axis=1)

    @cached_property
    def radius(self) -> np.ndarray:
        return np.sqrt(sum(c * c for c in self.coords))

    @cached_property
    def wavenumbers(self) -> tuple[np.ndarray, ...]:
        k = 2.0 * np.pi * np.fft.fftfreq(self.n, d=self.h)
        return tuple(np.meshgrid(*([k] * self.d), indexing="ij"))

    @cached_property
    def wavenumber_modulus(self) -> np.ndarray:
        return np.sqrt(sum(k * k for k in self.wavenumbers))

    def integrate(self, field: np.ndarray) -> float:
        return float(np.sum(field) * self.cell_volume)

    def zeros(self) -> np.ndarray:
        return np.zeros(self.shape)


def frac_laplacian_constant(d: int, s: float) -> float:
    """``C_{d,s} = 4^s Γ(d/2+s) / (π^{d/2} |Γ(-s)|)``."""
    return float(4.0**s * special.gamma(d / 2 + s) / (np.pi ** (d / 2) * abs(special.gamma(-s))))


def riesz_constant(d: int, s: float) -> float:
    """``k_{d,s} = Γ(d/2-s) / (4^s π^{d/2} Γ(s))``."""
    return float(special.gamma(d / 2 - s) / (4.0**s * np.pi ** (d / 2) * special.gamma(s)))


@dataclass(frozen=True)
class FracKernelConfig:
    """Order ``s``, the applied power ``sigma`` (``s`` or ``s/2``) and the method."""

    s: float
    d: int
    sigma: float | None = None
    method: str = "spectral"

    def __post_init__(self):
        if not 0.0 < self.s < 1.0:
            raise ValueError(f"order s must lie in (0,1), got {self.s}")
        if self.d not in (1, 2):
            raise ValueError(f"dimension must be 1 or 2, got {self.d}")
        if self.d <= 2 * self.s:
            raise ValueError(f"need d > 2s, got d={self.d}, s={self.s}")
        sigma = self.s if self.sigma is None else float(self.sigma)
        if not (np.isclose(sigma, self.s) or np.isclose(sigma, self.s / 2)):
            raise ValueError(f"power must be s or s/2, got {sigma}")
        object.__setattr__(self, "sigma", sigma)
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")

    @property
    def C(self) -> float:
        return frac_laplacian_constant(self.d, self.sigma)

    @property
    def k(self) -> float:
        return riesz_constant(self.d, self.s)

    def half(self) -> "FracKernelConfig":
        return FracKernelConfig(self.s, self.d, self.s / 2, self.method)


# ---------------------------------------------------------------- lattice sums


def dirichlet_beta(x: float) -> float:
    return float(4.0**-x * (mpmath.zeta(x, 0.25) - mpmath.zeta(x, 0.75)))


def lattice_zeta(d: int, p: float) -> float:
    """Analytically continued ``Σ_{j ∈ Z^d \\ 0} |j|^{-p}``."""
    if d == 1:
        return 2.0 * float(mpmath.zeta(p))
    return 4.0 * float(mpmath.zeta(p / 2)) * dirichlet_beta(p / 2)


def cell_average_power(exponent: float, h: float, d: int) -> float:
    """Average of ``|y|^{-exponent}`` over the cell ``[-h/2, h/2]^d`` (needs exponent < d)."""
    if exponent >= d:
        raise ValueError("cell average diverges for exponent >= d")
    if exponent == 0:
        return 1.0
    a = d - exponent
    if d == 1:
        return (2.0 / h) * (h / 2) ** a / a
    ang, _ = integrate.quad(lambda t: np.cos(t) ** (-a), 0.0, np.pi / 4)
    return (8.0 / h**2) * (h / 2) ** a / a * ang


def _correction_coefficient(d: int, sigma: float) -> float:
    """Weight of ``h^{2-2σ} Δf`` restoring the singular cell of the lattice sum."""
    return lattice_zeta(d, d + 2 * sigma - 2) / (2 * d)


def _periodic_kernel(grid: Grid, sigma: float) -> np.ndarray:
    """``Σ_images |y + 2L m|^{-d-2σ}`` at every lattice offset (zero at offset 0)."""
    n, L, h = grid.n, grid.L, grid.h
    p = grid.d + 2 * sigma
    offs = h * np.arange(n)
    offs = np.where(offs >= L, offs - 2 * L, offs)
    if grid.d == 1:
        y = np.abs(offs[1:]) / (2 * L)
        K = np.zeros(n)
        K[1:] = (2 * L) ** -p * (special.zeta(p, y) + special.zeta(p, 1.0 - y))
        return K
    X, Y = np.meshgrid(offs, offs, indexing="ij")
    K = np.zeros((n, n))
    M = 8
    for a in range(-M, M + 1):
        for b in range(-M, M + 1):
            r2 = (X + 2 * L * a) ** 2 + (Y + 2 * L * b) ** 2
            if a == 0 and b == 0:
                r2[0, 0] = np.inf
            K += r2 ** (-p / 2)
    side = (2 * M + 1) * L
    ang, _ = integrate.quad(lambda t: np.cos(t) ** (2 * sigma), 0.0, np.pi / 4)
    K += (8.0 / (2 * sigma)) * side ** (-2 * sigma) * ang / (2 * L) ** 2
    K[0, 0] = 0.0
    return K


def _discrete_laplacian_symbol(grid: Grid) -> np.ndarray:
    return -sum((2.0 - 2.0 * np.cos(k * grid.h)) / grid.h**2 for k in grid.wavenumbers)


@lru_cache(maxsize=64)
def _symbol(grid: Grid, sigma: float, method: str) -> np.ndarray:
    """Full-FFT symbol of the periodic operator (read-only)."""
    if method == "spectral":
        lam = grid.wavenumber_modulus ** (2 * sigma)
    else:
        if grid.n < 16:
            raise ValueError("quadrature needs at least 16 points per axis")
        C = frac_laplacian_constant(grid.d, sigma)
        W = C * grid.cell_volume * _periodic_kernel(grid, sigma)
        What = np.real(np.fft.fftn(W))
        corr = C * _correction_coefficient(grid.d, sigma) * grid.h ** (2 - 2 * sigma)
        lam = What.flat[0] - What + corr * _discrete_laplacian_symbol(grid)
    lam = np.array(lam, dtype=float)
    lam.flat[0] = 0.0
    lam.setflags(write=False)
    return lam


def operator_symbol(grid: Grid, cfg: FracKernelConfig) -> np.ndarray:
    """Fourier symbol of the periodic discrete operator ``(-Δ)^σ``."""
    return _symbol(grid, float(cfg.sigma), cfg.method)


def _check_field(field: np.ndarray, grid: Grid) -> np.ndarray:
    field = np.asarray(field, dtype=float)
    if field.shape != grid.shape:
        raise ValueError(f"field shape {field.shape} does not match grid {grid.shape}")
    if not np.all(np.isfinite(field)):
        bad = int(np.size(field) - np.count_nonzero(np.isfinite(field)))
        raise ValueError(f"field has {bad} non-finite values")
    return field


def apply_symbol(field: np.ndarray, lam: np.ndarray) -> np.ndarray:
    return np.real(np.fft.ifftn(lam * np.fft.fftn(field)))


def apply_frac_power(
    field: np.ndarray,
    grid: Grid,
    cfg: FracKernelConfig,
    exterior: None | float | Callable[[np.ndarray], np.ndarray] = None,
) -> np.ndarray:
    """Apply ``(-Δ)^σ`` to a field on ``grid``.

    ``exterior=None`` treats the field as periodic. A number (normally 0) or,
    in 1D, a callable giving the field outside the box switches the quadrature
    to free space; this requires ``cfg.method == "quadrature"``.
    """
    field = _check_field(field, grid)
    if exterior is None:
        return apply_symbol(field, operator_symbol(grid, cfg))
    if cfg.method != "quadrature":
        raise ValueError("free-space evaluation is only available for the quadrature method")
    if grid.n < 16:
        raise ValueError("quadrature needs at least 16 points per axis")
    if callable(exterior):
        return _free_space_with_far_field(field, grid, cfg.sigma, exterior)
    if exterior != 0.0:
        raise ValueError("a constant exterior must be zero (the operator kills constants)")
    return _free_space(field, grid, cfg.sigma)


def _offset_kernel(grid: Grid, power: float, n: int | None = None) -> np.ndarray:
    """``|offset|^{-power}`` on the ``(2n-1)^d`` linear-convolution stencil, zero at centre."""
    n = grid.n if n is None else n
    r = grid.h * np.abs(np.arange(-(n - 1), n, dtype=float))
    if grid.d == 1:
        rr = r
    else:
        rr = np.sqrt(r[:, None] ** 2 + r[None, :] ** 2)
    centre = (n - 1,) * grid.d
    rr[centre] = 1.0
    K = rr ** (-power)
    K[centre] = 0.0
    return K


@lru_cache(maxsize=16)
def _free_kernel(grid: Grid, sigma: float) -> np.ndarray:
    K = _offset_kernel(grid, grid.d + 2 * sigma)
    K.setflags(write=False)
    return K


def _zero_pad_laplacian(field: np.ndarray, h: float) -> np.ndarray:
    out = np.zeros_like(field)
    for ax in range(field.ndim):
        p = np.pad(field, [(1, 1) if a == ax else (0, 0) for a in range(field.ndim)])
        sl = [slice(None)] * field.ndim
        lo, mid, hi = list(sl), list(sl), list(sl)
        lo[ax], mid[ax], hi[ax] = slice(0, -2), slice(1, -1), slice(2, None)
        out += (p[tuple(lo)] - 2 * p[tuple(mid)] + p[tuple(hi)]) / h**2
    return out


def _free_space(field: np.ndarray, grid: Grid, sigma: float) -> np.ndarray:
    d, h = grid.d, grid.h
    C = frac_laplacian_constant(d, sigma)
    total = lattice_zeta(d, d + 2 * sigma) * h ** (-2 * sigma)
    conv = fftconvolve(field, _free_kernel(grid, sigma), mode="same")
    corr = _correction_coefficient(d, sigma) * h ** (2 - 2 * sigma)
    return C * (field * total - h**d * conv + corr * _zero_pad_laplacian(field, h))


def _free_space_with_far_field(field, grid, sigma, far, extension: int = 16):
    if grid.d != 1:
        raise ValueError("a far-field exterior is only supported in 1D")
    n, h, L = grid.n, grid.h, grid.L
    big = Grid(1, n * extension, L * extension)
    x = big.axis
    inside = np.abs(x) < L - 0.5 * h
    ext = np.where(inside, 0.0, np.asarray(far(np.where(inside, 1.0, x)), dtype=float))
    lo = (big.n - n) // 2
    ext[lo:lo + n] = field
    Lext = _free_space(ext, big, sigma)[lo:lo + n]
    C = frac_laplacian_constant(1, sigma)
    R = big.L
    xs = grid.axis
    p = 1 + 2 * sigma

    def integrand(y):
        fy = float(np.asarray(far(np.array([y])))[0])
        fmy = float(np.asarray(far(np.array([-y])))[0])
        return fy * (y - xs) ** -p + fmy * (y + xs) ** -p

    val, _ = integrate.quad_vec(integrand, R, np.inf, epsrel=1e-10, epsabs=0.0)
    return Lext - C * val


# ------------------------------------------------------------- forms and norms


def pairing(v: np.ndarray, w: np.ndarray, grid: Grid) -> float:
    """Discrete ``L²`` pairing ``Σ v w h^d``."""
    return float(np.sum(np.asarray(v) * np.asarray(w)) * grid.cell_volume)


def hs_seminorm(field: np.ndarray, grid: Grid, s: float) -> float:
    """``‖(-Δ)^{s/2} field‖_{L²}`` computed with the spectral multiplier."""
    field = _check_field(field, grid)
    fhat = np.fft.fftn(field)
    energy = np.sum(grid.wavenumber_modulus ** (2 * s) * np.abs(fhat) ** 2)
    return float(np.sqrt(energy * grid.cell_volume / field.size))


def nonlocal_energy_density(field: np.ndarray, grid: Grid, s: float) -> np.ndarray:
    """``∫ (ξ(x) - ξ(y))² |x-y|^{-d-2s} dy`` for a field vanishing outside the box."""
    field = _check_field(field, grid)
    d, h = grid.d, grid.h
    K = _free_kernel(grid, s)
    total = lattice_zeta(d, d + 2 * s) * h ** (-2 * s)
    cross = fftconvolve(field, K, mode="same")
    sq = fftconvolve(field * field, K, mode="same")
    padded = np.pad(field, 1)
    grads = np.gradient(padded, h) if d > 1 else [np.gradient(padded, h)]
    inner = tuple(slice(1, -1) for _ in range(d))
    grad2 = sum(g[inner] ** 2 for g in grads)
    corr = lattice_zeta(d, d + 2 * s - 2) / d * h ** (2 - 2 * s)
    return field**2 * total - 2 * h**d * field * cross + h**d * sq - corr * grad2


# ----------------------------------------------------------- Riesz potentials


def periodic_inverse(values: np.ndarray, grid: Grid, cfg: FracKernelConfig) -> np.ndarray:
    """Zero-mean solution ``U`` of ``(-Δ)^σ U = values - mean(values)`` on the torus."""
    lam = operator_symbol(grid, cfg)
    inv = np.zeros_like(lam)
    inv[lam > 0] = 1.0 / lam[lam > 0]
    return apply_symbol(values, inv)


def riesz_potential(source, grid: Grid, cfg: FracKernelConfig) -> np.ndarray:
    """``I_{2s} * source`` at the nodes, in free space.

    ``source`` is a density field or any object with ``atoms`` (sequence of
    ``(location, mass)``) and ``density`` (field or ``None``).
    """
    s, d = cfg.s, grid.d
    if d <= 2 * s:
        raise ValueError(f"Riesz kernel needs d > 2s, got d={d}, s={s}")
    k = riesz_constant(d, s)
    expo = d - 2 * s
    if isinstance(source, np.ndarray) or np.isscalar(source):
        atoms, density = (), np.asarray(source, dtype=float)
    else:
        atoms, density = tuple(source.atoms), source.density
    out = grid.zeros()
    if density is not None:
        density = _check_field(density, grid)
        if np.any(density < 0):
            raise ValueError("source density must be nonnegative")
        K = _offset_kernel(grid, expo)
        K[(grid.n - 1,) * d] = cell_average_power(expo, grid.h, d)
        out += k * grid.cell_volume * fftconvolve(density, K, mode="same")
    self_value = k * cell_average_power(expo, grid.h, d)
    for loc, mass in atoms:
        if mass < 0:
            raise ValueError("atom masses must be nonnegative")
        loc = np.atleast_1d(np.asarray(loc, dtype=float))
        r = np.sqrt(sum((c - a) ** 2 for c, a in zip(grid.coords, loc)))
        on_node = r < 1e-9 * grid.h
        r = np.where(on_node, 1.0, r)
        out += mass * np.where(on_node, self_value, k * r ** (-expo))
    return out


def monopole_far_field(mass: float, centre: float, cfg: FracKernelConfig) -> Callable:
    """Leading far-field term ``k M |x - c|^{2s-d}`` of a compact source's potential."""
    k = riesz_constant(cfg.d, cfg.s)
    expo = cfg.d - 2 * cfg.s

    def far(x):
        return k * mass * np.abs(np.asarray(x) - centre) ** (-expo)

    return far


# --------------------------------------------------------------- cut-off family


def smooth_cutoff_profile(r: np.ndarray) -> np.ndarray:
    """Radial profile equal to 1 on ``r <= 1``, 0 on ``r >= 2``, C³ in between."""
    t = np.clip(np.asarray(r, dtype=float) - 1.0, 0.0, 1.0)
    return 1.0 - t**4 * (35.0 - 84.0 * t + 70.0 * t**2 - 20.0 * t**3)


@dataclass(frozen=True)
class CutoffFamily:
    """The rescaled cut-off ``ξ_R(x) = ξ(x/R)`` with its nonlocal fields cached."""

    grid: Grid
    s: float
    R: float = 1.0
    profile: str = "smoothstep7"

    def __post_init__(self):
        if self.R <= 0:
            raise ValueError("radius must be positive")
        if 2 * self.R >= self.grid.L:
            raise ValueError("support radius 2R must lie inside the box")
        FracKernelConfig(self.s, self.grid.d)

    @cached_property
    def field(self) -> np.ndarray:
        return smooth_cutoff_profile(self.grid.radius / self.R)

    @cached_property
    def frac_laplacian(self) -> np.ndarray:
        cfg = FracKernelConfig(self.s, self.grid.d, method="quadrature")
        return apply_frac_power(self.field, self.grid, cfg, exterior=0.0)

    @cached_property
    def energy_density(self) -> np.ndarray:
        return nonlocal_energy_density(self.field, self.grid, self.s)

    def rescaled(self, R: float) -> "CutoffFamily":
        return CutoffFamily(self.grid, self.s, R, self.profile)


def _sample_at(field: np.ndarray, grid: Grid, pts: np.ndarray) -> np.ndarray:
    """Values at scaled positions; exact when they fall on nodes, cubic otherwise."""
    j = (pts + grid.L) / grid.h
    idx = np.rint(j)
    if np.allclose(j, idx, atol=1e-9):
        return field[tuple(idx.astype(int).T)]
    axes = (grid.axis,) * grid.d
    return RegularGridInterpolator(axes, field, method="cubic")(pts)


def _tail_slope(values: np.ndarray, radius: np.ndarray, lo: float, hi: float) -> float:
    sel = (radius >= lo) & (radius <= hi) & (np.abs(values) > 0)
    if np.count_nonzero(sel) < 4:
        return float("nan")
    return float(np.polyfit(np.log(radius[sel]), np.log(np.abs(values[sel])), 1)[0])


def cutoff_scaling_check(
    family: CutoffFamily,
    tolerance: float = 1e-3,
    tail_window: tuple[float, float] = (4.0, 16.0),
    slope_tolerance: float = 0.2,
) -> DiagnosticsReport:
    """Compare ``ξ_R`` fields with the rescaled ``ξ_1`` fields, and fit their tails."""
    grid, s, R, d = family.grid, family.s, family.R, family.grid.d
    base = family if R == 1.0 else family.rescaled(1.0)
    pts = grid.points
    inside = np.all(np.abs(pts / R) <= grid.L - grid.h, axis=1) & np.all(np.abs(pts) < grid.L, axis=1)
    pts_in = pts[inside]
    results = {}
    for name in ("frac_laplacian", "energy_density"):
        mine = getattr(family, name).ravel()[inside]
        if R == 1.0:
            ref = mine.copy()
        else:
            ref = R ** (-2 * s) * _sample_at(getattr(base, name), grid, pts_in / R)
        results[f"{name}_residual"] = float(np.max(np.abs(mine - ref)) / np.max(np.abs(ref)))
    lo, hi = tail_window
    hi = min(hi, grid.L - grid.h)
    target = -(d + 2 * s)
    for name in ("frac_laplacian", "energy_density"):
        slope = _tail_slope(getattr(base, name).ravel(), grid.radius.ravel(), lo, hi)
        results[f"{name}_tail_slope"] = slope
    limits = {
        "frac_laplacian_residual": le(tolerance if R != 1.0 else 1e-12),
        "energy_density_residual": le(tolerance if R != 1.0 else 1e-12),
        "frac_laplacian_tail_slope": between(target - slope_tolerance, target + slope_tolerance),
        "energy_density_tail_slope": between(target - slope_tolerance, target + slope_tolerance),
    }
    params = {"d": d, "s": s, "R": R, "n": grid.n, "L": grid.L, "profile": family.profile,
              "tail_window": [lo, hi]}
    return DiagnosticsReport("cutoff_scaling", params, results, limits)
