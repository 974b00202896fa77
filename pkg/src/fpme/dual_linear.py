"""The weighted operator A = ρ^{-1}(-Δ)^s, its semigroup, and the backward dual problem."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import ndimage
from scipy.sparse.linalg import LinearOperator, expm_multiply

from .domain_model import Mollifier
from .frac_ops import FracKernelConfig, Grid, apply_symbol, operator_symbol
from .pme_solver import Trajectory
from .report import DiagnosticsReport, ge, le

DENSE_LIMIT = 1024
COINCIDENCE_THRESHOLD = 1e-13


@dataclass(frozen=True, eq=False)
class WeightedOperator:
    """``A v = ρ^{-1}(-Δ)^s v`` on a periodic grid; self-adjoint in ``L²_ρ``."""

    grid: Grid
    rho: np.ndarray
    s: float
    method: str = "spectral"

    def __post_init__(self):
        rho = np.array(self.rho, dtype=float)
        if rho.shape != self.grid.shape or not np.all(rho > 0):
            raise ValueError("weight must be a strictly positive field on the grid")
        rho.setflags(write=False)
        object.__setattr__(self, "rho", rho)

    @cached_property
    def symbol(self) -> np.ndarray:
        return operator_symbol(self.grid, FracKernelConfig(self.s, self.grid.d, method=self.method))

    @property
    def size(self) -> int:
        return self.rho.size

    @property
    def can_densify(self) -> bool:
        return self.size <= DENSE_LIMIT

    def laplacian(self, v: np.ndarray) -> np.ndarray:
        return apply_symbol(v, self.symbol)

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self.laplacian(v) / self.rho

    @cached_property
    def laplacian_matrix(self) -> np.ndarray:
        """Dense symmetric matrix of ``(-Δ)^s`` (periodic convolution)."""
        if not self.can_densify:
            raise ValueError(f"refusing to densify {self.size} unknowns (limit {DENSE_LIMIT})")
        col = np.real(np.fft.ifftn(self.symbol))
        idx = np.indices(self.grid.shape).reshape(self.grid.d, -1)
        diff = tuple((idx[a][:, None] - idx[a][None, :]) % self.grid.n for a in range(self.grid.d))
        mat = col[diff]
        return 0.5 * (mat + mat.T)

    @cached_property
    def spectral_data(self) -> tuple[np.ndarray, np.ndarray]:
        """Eigenpairs of the symmetrized form ``ρ^{-1/2}(-Δ)^s ρ^{-1/2}``."""
        r = 1.0 / np.sqrt(self.rho.ravel())
        sym = r[:, None] * self.laplacian_matrix * r[None, :]
        evals, evecs = np.linalg.eigh(0.5 * (sym + sym.T))
        return evals, evecs

    def semigroup(self, v0: np.ndarray, t: float) -> np.ndarray:
        if t < 0:
            raise ValueError("semigroup time must be nonnegative")
        v0 = np.asarray(v0, dtype=float)
        if t == 0:
            return v0.copy()
        if self.can_densify:
            evals, evecs = self.spectral_data
            root = np.sqrt(self.rho.ravel())
            coef = evecs.T @ (root * v0.ravel())
            out = evecs @ (np.exp(-t * np.maximum(evals, 0.0)) * coef) / root
            return out.reshape(self.grid.shape)
        return self._semigroup_krylov_free(v0, t)

    def _semigroup_krylov_free(self, v0, t):
        shape, n = self.grid.shape, self.size
        inv_rho = (1.0 / self.rho).ravel()
        lam = self.symbol
        op = LinearOperator((n, n), dtype=float,
                            matvec=lambda x: -t * inv_rho * apply_symbol(x.reshape(shape), lam).ravel(),
                            rmatvec=lambda x: -t * apply_symbol((inv_rho * x.ravel()).reshape(shape), lam).ravel())
        trace = -t * float(np.mean(self.symbol)) * float(np.sum(inv_rho))
        return expm_multiply(op, v0.ravel(), traceA=trace).reshape(shape)


def apply_A(op: WeightedOperator, v: np.ndarray) -> np.ndarray:
    return op.apply(v)


def semigroup_step(op: WeightedOperator, v0: np.ndarray, t: float) -> np.ndarray:
    """``e^{-tA} v0``."""
    return op.semigroup(v0, t)


def weighted_inner(v: np.ndarray, w: np.ndarray, rho: np.ndarray, grid: Grid) -> float:
    return float(np.sum(v * w * rho) * grid.cell_volume)


def operator_report(op: WeightedOperator, samples: int = 50, t: float = 0.05, seed: int = 0,
                    tol: float = 1e-10, symmetry_tol: float = 1e-12) -> DiagnosticsReport:
    """Dirichlet-form properties of ``A`` on random samples.

    Weighted symmetry is measured relative to the size of the pairing. The
    semigroup is checked for positivity, invariance of constants and
    non-expansiveness in ``L^∞`` and ``L¹_ρ``.
    """
    rng = np.random.default_rng(seed)
    grid, rho, h = op.grid, op.rho, op.grid.cell_volume
    sym = pos = expand_inf = expand_l1 = 0.0
    for _ in range(samples):
        v, w = rng.standard_normal(grid.shape), rng.standard_normal(grid.shape)
        a = weighted_inner(op.apply(v), w, rho, grid)
        b = weighted_inner(v, op.apply(w), rho, grid)
        sym = max(sym, abs(a - b) / max(abs(a), abs(b), 1e-300))
        plus = rng.random(grid.shape)
        pos = max(pos, float(-op.semigroup(plus, t).min()))
        pv = op.semigroup(v, t)
        expand_inf = max(expand_inf, float(np.abs(pv).max() - np.abs(v).max()))
        expand_l1 = max(expand_l1, float(np.sum(np.abs(pv) * rho) * h - np.sum(np.abs(v) * rho) * h))
    results = {
        "symmetry_error": sym,
        "positivity_violation": max(pos, 0.0),
        "constants_drift": float(np.abs(op.semigroup(np.ones(grid.shape), t) - 1).max()),
        "linf_expansion": expand_inf,
        "l1_expansion": expand_l1,
    }
    limits = {"symmetry_error": le(symmetry_tol), "positivity_violation": le(tol), "constants_drift": le(tol),
              "linf_expansion": le(tol), "l1_expansion": le(tol)}
    if op.can_densify:
        results["min_eigenvalue"] = float(op.spectral_data[0].min())
        limits["min_eigenvalue"] = ge(-tol)
    params = {"n": grid.n, "d": grid.d, "s": op.s, "samples": samples, "t": t, "seed": seed}
    return DiagnosticsReport("weighted_operator", params, results, limits)


# ----------------------------------------------------------------- dual problem


@dataclass(frozen=True, eq=False)
class DualCoefficient:
    """Piecewise-constant coefficient: ``fields[k]`` holds on ``(T-(k+1)T/n, T-kT/n]``."""

    grid: Grid
    T: float
    fields: np.ndarray
    eps: float

    def __post_init__(self):
        f = np.array(self.fields, dtype=float)
        if f.ndim != self.grid.d + 1 or f.shape[1:] != self.grid.shape:
            raise ValueError("coefficient fields do not match the grid")
        if np.any(f < 0) or not np.all(np.isfinite(f)):
            raise ValueError("coefficient must be finite and nonnegative")
        if not self.eps > 0:
            raise ValueError("floor eps must be positive")
        f.setflags(write=False)
        object.__setattr__(self, "fields", f)

    @property
    def n(self) -> int:
        return self.fields.shape[0]

    @property
    def boundaries(self) -> np.ndarray:
        """``T - kT/n`` for ``k = 0..n`` (decreasing)."""
        return self.T - self.T * np.arange(self.n + 1) / self.n

    def interval_of(self, t: float) -> int:
        """Index ``k`` with ``t`` in ``(T-(k+1)T/n, T-kT/n]``."""
        k = int(np.ceil((self.T - t) / (self.T / self.n) - 1e-9)) - 1
        return min(max(k, 0), self.n - 1)

    def with_eps(self, eps: float) -> "DualCoefficient":
        return DualCoefficient(self.grid, self.T, self.fields, eps)


def difference_quotient(u1: np.ndarray, u2: np.ndarray, m: float) -> np.ndarray:
    """``(u1^m - u2^m)/(u1 - u2)``, set to 0 where ``|u1 - u2| <= 1e-13``."""
    diff = u1 - u2
    far = np.abs(diff) > COINCIDENCE_THRESHOLD
    out = np.zeros_like(u1)
    out[far] = (u1[far] ** m - u2[far] ** m) / diff[far]
    return out


def _smooth(a: np.ndarray, grid: Grid, scale: float) -> np.ndarray:
    if scale <= 0:
        return a
    stencil = Mollifier(scale * grid.h).stencil(grid)
    return ndimage.convolve(a, stencil, mode="wrap")


def build_coefficient(u1: Trajectory, u2: Trajectory, h: float, n: int, T: float | None = None,
                      eps: float = 1e-3, smoothing: float = 0.0) -> DualCoefficient:
    """Sample the difference quotient of ``u1(t)`` and ``u2(t+h)`` at interval left endpoints.

    Times between recorded states are linearly interpolated.

    ``smoothing`` is a mollification width in grid spacings (0 keeps the raw quotient).
    """
    if u1.grid != u2.grid:
        raise ValueError("trajectories live on different grids")
    if u1.m != u2.m:
        raise ValueError("trajectories have different m")
    if h < 0:
        raise ValueError("time offset must be nonnegative")
    T = float(u1.times[-1] if T is None else T)
    if T + h > u2.times[-1] + 1e-12:
        raise ValueError("second trajectory does not reach T + h")
    grid, m = u1.grid, u1.m
    fields = []
    for k in range(n):
        t = T - (k + 1) * T / n
        a = difference_quotient(u1.field_at(t), u2.field_at(t + h), m)
        fields.append(_smooth(a, grid, smoothing))
    return DualCoefficient(grid, T, np.stack(fields), eps)


@dataclass(frozen=True, eq=False)
class DualSolution:
    """``ψ_{n,ε}`` marched backward from ``T``; ``values[k]`` is ψ at ``coef.boundaries[k]``."""

    coef: DualCoefficient
    base: WeightedOperator
    values: tuple
    direction: str = "backward"

    @property
    def times(self) -> np.ndarray:
        return self.coef.boundaries

    def interval_operator(self, k: int) -> WeightedOperator:
        return _interval_operator(self.base, self.coef, k)

    def at(self, t: float) -> np.ndarray:
        """ψ at any ``t`` in ``[0, T]``, by the exact semigroup within its interval."""
        k = self.coef.interval_of(t)
        top = self.coef.boundaries[k]
        if abs(t - top) < 1e-15:
            return self.values[k]
        c = self.coef.fields[k] + self.coef.eps
        return self.interval_operator(k).semigroup(c * self.values[k], top - t) / c

    def masses(self) -> np.ndarray:
        return np.array([weighted_inner(v, 1.0, self.base.rho, self.base.grid) for v in self.values])


def _interval_operator(base: WeightedOperator, coef: DualCoefficient, k: int) -> WeightedOperator:
    cache = base.__dict__.setdefault("_interval_cache", {})
    key = (id(coef), k)
    if key not in cache:
        cache[key] = (coef, WeightedOperator(base.grid, base.rho / (coef.fields[k] + coef.eps), base.s, base.method))
    return cache[key][1]


def solve_dual(coef: DualCoefficient, psi: np.ndarray, base: WeightedOperator) -> DualSolution:
    """March ``ρψ_t = (-Δ)^s[(a_n+ε)ψ]`` backward from ``ψ(T) = psi``.

    On each interval ``φ = (a_n+ε)ψ`` follows the semigroup of ``ρ_k^{-1}(-Δ)^s``
    with ``ρ_k = ρ/(a_n+ε)``.
    """
    psi = np.asarray(psi, dtype=float)
    if np.any(psi < 0):
        raise ValueError("final datum must be nonnegative")
    if psi.shape != base.grid.shape or coef.grid != base.grid:
        raise ValueError("final datum, coefficient and operator grids differ")
    values = [psi.copy()]
    step = coef.T / coef.n
    for k in range(coef.n):
        c = coef.fields[k] + coef.eps
        if not np.all(c > 0):
            raise ValueError("a_n + eps must be strictly positive")
        phi = _interval_operator(base, coef, k).semigroup(c * values[-1], step)
        values.append(phi / c)
    return DualSolution(coef, base, tuple(values))


# -------------------------------------------------------------- duality identity


@dataclass(frozen=True, eq=False)
class PotentialDifference:
    """``g = U2(·+h) - U1`` sampled at the common solver steps.

    ``U1, U2`` are the scheme-consistent potentials, so ``(-Δ)^s g = ρ(u2(t+h) - u1(t))``
    up to its mean and, between steps, ``g`` is linear in time with slope ``-Δw``,
    ``Δw = u2^m(t+h) - u1^m(t)`` at the step's right end.
    """

    grid: Grid
    rho: np.ndarray
    times: np.ndarray
    values: np.ndarray
    du: np.ndarray
    dw: np.ndarray
    s: float
    method: str = "spectral"

    @cached_property
    def symbol(self) -> np.ndarray:
        return operator_symbol(self.grid, FracKernelConfig(self.s, self.grid.d, method=self.method))

    @cached_property
    def frac_laplacian(self) -> np.ndarray:
        """``(-Δ)^s g`` at the steps."""
        return np.stack([apply_symbol(g, self.symbol) for g in self.values])

    def step_index(self, t: float) -> int:
        """Index ``j`` with ``t`` in ``[times[j], times[j+1]]``."""
        j = int(np.searchsorted(self.times, t, side="right")) - 1
        return min(max(j, 0), len(self.times) - 2)

    def at(self, t: float) -> np.ndarray:
        j = self.step_index(t)
        th = (t - self.times[j]) / (self.times[j + 1] - self.times[j])
        return (1 - th) * self.values[j] + th * self.values[j + 1]

    def frac_laplacian_at(self, t: float) -> np.ndarray:
        j = self.step_index(t)
        th = (t - self.times[j]) / (self.times[j + 1] - self.times[j])
        return (1 - th) * self.frac_laplacian[j] + th * self.frac_laplacian[j + 1]


def potential_difference(u1: Trajectory, u2: Trajectory, h: float, T: float | None = None) -> PotentialDifference:
    """Assemble ``g`` on the steps of ``u1`` in ``[0, T]``; ``h`` must be a multiple of the uniform step."""
    T = float(u1.times[-1] if T is None else T)
    times = u1.times[u1.times <= T + 1e-12]
    dts = np.diff(times)
    if not np.allclose(dts, dts[0], rtol=1e-9):
        raise ValueError("the duality identity needs a uniform time step")
    shift = h / dts[0]
    if abs(shift - round(shift)) > 1e-6:
        raise ValueError("time offset h must be a multiple of the step")
    m = u1.m
    gs, du, dw = [], [], []
    for t in times:
        i, j = u1.index_of(t), u2.index_of(t + h)
        a, b = u1.states[i].u, u2.states[j].u
        gs.append(u2.potentials[j] - u1.potentials[i])
        du.append(b - a)
        dw.append(b**m - a**m)
    return PotentialDifference(u1.grid, u1.rho, times, np.stack(gs), np.stack(du), np.stack(dw),
                               u1.cfg.s, u1.cfg.method)


def _pieces(g: PotentialDifference, coef: DualCoefficient, t: float) -> list[tuple[float, float]]:
    cuts = np.union1d(g.times, coef.boundaries)
    cuts = np.union1d(cuts[(cuts > t) & (cuts < coef.T)], [t, coef.T])
    return list(zip(cuts[:-1], cuts[1:]))


def duality_identity_check(g: PotentialDifference, dual: DualSolution, coef: DualCoefficient, t: float,
                           tol: float = 1e-6, order: int = 6) -> DiagnosticsReport:
    """Both sides of the duality identity on ``[t, T]``, and the ε-bound.

    The a-term uses the coefficient the implicit step actually applies,
    ``a ρ Δu = ρ Δw`` at each step's right end.
    """
    rho, h = g.rho, g.grid.cell_volume
    T = coef.T
    lhs = float(np.sum(g.at(T) * dual.values[0] * rho) * h - np.sum(g.at(t) * dual.at(t) * rho) * h)
    nodes, weights = np.polynomial.legendre.leggauss(order)
    approx_term = eps_term = a_term = 0.0
    for lo, hi in _pieces(g, coef, t):
        mid = 0.5 * (lo + hi)
        k = coef.interval_of(mid)
        j = g.step_index(mid)
        dw_right = g.dw[j + 1]
        for x, w in zip(nodes, weights):
            tau = mid + 0.5 * (hi - lo) * x
            wt = 0.5 * (hi - lo) * w
            psi = dual.at(tau)
            Lg = g.frac_laplacian_at(tau)
            approx_term += wt * float(np.sum(coef.fields[k] * psi * Lg) * h)
            eps_term += wt * coef.eps * float(np.sum(psi * Lg) * h)
            a_term += wt * float(np.sum(rho * dw_right * psi) * h)
    rhs = approx_term + eps_term - a_term
    psi_mass = float(np.sum(dual.values[0] * rho) * h)
    lg_sup = float(np.max(np.abs(g.frac_laplacian / rho)))
    du_sup = float(np.max(np.abs(g.du)))
    eps_bound = coef.eps * (T - t) * psi_mass * lg_sup
    results = {
        "lhs": lhs,
        "rhs": rhs,
        "identity_residual": abs(lhs - rhs),
        "approximation_term": approx_term - a_term,
        "eps_term": eps_term,
        "eps_bound": eps_bound,
        "eps_bound_margin": eps_bound - abs(eps_term),
        "sup_du": du_sup,
        "lhs_within_eps_bound": bool(abs(lhs) <= eps_bound),
    }
    limits = {"identity_residual": le(tol)}
    flags = {"eps_term_bounded": abs(eps_term) <= eps_bound * (1 + 1e-12) + 1e-300}
    params = {"t": t, "T": T, "n_intervals": coef.n, "eps": coef.eps, "quadrature_order": order}
    return DiagnosticsReport("duality_identity", params, results, limits, flags)
