"""Implicit time stepping for ρ u_t + (-Δ)^s(u^m) = 0 and its a-priori estimates."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

from .domain_model import MeasureSpec, Mollifier, WeightSpec, eval_weight, mollify_measure, weighted_norm
from .frac_ops import FracKernelConfig, Grid, apply_symbol, hs_seminorm, operator_symbol, periodic_inverse, riesz_potential
from .report import DiagnosticsReport, le, ge

log = logging.getLogger(__name__)

JACOBIAN_FLOOR = 1e-12


class StepFailure(RuntimeError):
    """Newton did not converge, or converged to a state with significant negative values."""


class SolverAbort(RuntimeError):
    """A step kept failing after the maximal number of dt halvings."""

    def __init__(self, message: str, step_log: list):
        super().__init__(message)
        self.step_log = step_log


@dataclass(frozen=True)
class SolverConfig:
    """Nonlinearity ``m``, order ``s``, final time ``T`` and the dt schedule.

    With ``dt0`` unset the schedule is uniform with step ``dt``; otherwise it is
    the geometric ramp ``dt0 * ramp**k`` capped at ``dt``. Newton stops when the
    step residual, measured in ``u`` units in ``L²_ρ``, is below ``tol``.
    """

    m: float
    s: float
    T: float
    dt: float = 1e-3
    dt0: float | None = None
    ramp: float = 1.1
    tol: float = 1e-10
    max_newton: int = 60
    max_halvings: int = 20
    method: str = "spectral"
    subdivide: int = 1

    def __post_init__(self):
        if self.subdivide < 1:
            raise ValueError("subdivide must be a positive integer")
        if not self.m > 1:
            raise ValueError(f"m must exceed 1, got {self.m}")
        if not (self.dt > 0 and self.T > 0 and self.tol > 0):
            raise ValueError("dt, T and tol must be positive")
        if self.dt0 is not None and not (0 < self.dt0 <= self.dt and self.ramp >= 1):
            raise ValueError("ramp needs 0 < dt0 <= dt and ramp >= 1")

    def time_grid(self) -> np.ndarray:
        """Step times from 0 to ``T`` inclusive; each nominal step is split ``subdivide`` times."""
        base = self._nominal_times()
        if self.subdivide == 1:
            return base
        frac = np.arange(self.subdivide) / self.subdivide
        fine = (base[:-1, None] + np.diff(base)[:, None] * frac[None, :]).ravel()
        return np.append(fine, base[-1])

    def _nominal_times(self) -> np.ndarray:
        if self.dt0 is None:
            k = int(round(self.T / self.dt))
            if abs(k * self.dt - self.T) > 1e-9 * self.T:
                k = int(np.ceil(self.T / self.dt))
            times = np.minimum(self.dt * np.arange(k + 1), self.T)
            times[-1] = self.T
            return times
        times, t, step = [0.0], 0.0, self.dt0
        while t < self.T * (1 - 1e-12):
            t = min(t + step, self.T)
            if self.T - t < 1e-3 * step:
                t = self.T
            times.append(t)
            step = min(step * self.ramp, self.dt)
        return np.array(times)

    def kernel_for(self, grid: Grid) -> FracKernelConfig:
        return FracKernelConfig(self.s, grid.d, method=self.method)


@dataclass(frozen=True)
class StateField:
    u: np.ndarray
    t: float
    m: float

    def __post_init__(self):
        u = np.array(self.u, dtype=float)
        if np.any(u < 0):
            raise ValueError("state must be nonnegative")
        u.setflags(write=False)
        object.__setattr__(self, "u", u)

    @cached_property
    def z(self) -> np.ndarray:
        return self.u ** ((self.m + 1) / 2)

    @cached_property
    def pressure(self) -> np.ndarray:
        return self.u**self.m


@dataclass(frozen=True)
class Trajectory:
    grid: Grid
    states: tuple
    rho: np.ndarray = field(compare=False)
    cfg: SolverConfig
    measure: MeasureSpec | None = None
    weight: WeightSpec | None = None
    eps: float | None = None
    step_log: tuple = field(default=(), compare=False)
    direction: str = "forward"

    def __post_init__(self):
        t = self.times
        if np.any(np.diff(t) <= 0):
            raise ValueError("trajectory times must be strictly increasing")

    @property
    def times(self) -> np.ndarray:
        return np.array([st.t for st in self.states])

    @property
    def m(self) -> float:
        return self.cfg.m

    def fields(self) -> np.ndarray:
        return np.stack([st.u for st in self.states])

    def masses(self) -> np.ndarray:
        h = self.grid.cell_volume
        return np.array([np.sum(st.u * self.rho) * h for st in self.states])

    @property
    def initial_mass(self) -> float:
        return float(self.masses()[0])

    def mass_drift(self) -> float:
        """Largest relative deviation of the weighted mass from its initial value."""
        mass = self.masses()
        if mass[0] == 0:
            return float(np.max(np.abs(mass)))
        return float(np.max(np.abs(mass - mass[0])) / abs(mass[0]))

    def index_of(self, t: float) -> int:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"time {t} is not recorded")
        return i

    def state_at(self, t: float) -> StateField:
        return self.states[self.index_of(t)]

    def field_at(self, t: float) -> np.ndarray:
        """State at ``t``, linearly interpolated between recorded times."""
        times = self.times
        if t < times[0] - 1e-12 or t > times[-1] + 1e-12:
            raise ValueError(f"time {t} outside [{times[0]}, {times[-1]}]")
        j = int(np.searchsorted(times, t, side="right")) - 1
        j = min(max(j, 0), len(times) - 2)
        th = min(max((t - times[j]) / (times[j + 1] - times[j]), 0.0), 1.0)
        if th < 1e-12:
            return self.states[j].u
        if th > 1 - 1e-12:
            return self.states[j + 1].u
        return (1 - th) * self.states[j].u + th * self.states[j + 1].u

    def sup_norms(self) -> np.ndarray:
        return np.array([st.u.max() for st in self.states])

    def energies(self) -> np.ndarray:
        """``∫ u^{m+1} ρ`` at each recorded time."""
        h = self.grid.cell_volume
        return np.array([np.sum(st.u ** (self.m + 1) * self.rho) * h for st in self.states])

    @cached_property
    def potentials(self) -> np.ndarray:
        """Riesz potentials of ``ρ u`` consistent with the periodic scheme.

        The first is the free-space ``I_{2s} * (ρ u(0))``. Each step adds the
        zero-mean periodic inverse of ``ρ Δu`` and ``-dt mean(u^m)``, the constant
        mode the periodic operator cannot see, so that ``ΔU = -dt u^m`` exactly.
        """
        s, grid = self.cfg.s, self.grid
        cfg = FracKernelConfig(s, grid.d, method=self.cfg.method)
        out = [riesz_potential(self.states[0].u * self.rho, grid, FracKernelConfig(s, grid.d))]
        for prev, nxt in zip(self.states[:-1], self.states[1:]):
            jump = periodic_inverse(self.rho * (nxt.u - prev.u), grid, cfg)
            out.append(out[-1] + jump - (nxt.t - prev.t) * float(np.mean(nxt.pressure)))
        arr = np.stack(out)
        arr.flags.writeable = False
        return arr


def _odd_power(v: np.ndarray, m: float) -> np.ndarray:
    return np.abs(v) ** (m - 1) * v


def _step_residual(v, u, dt, rho, lam, m):
    return rho * (v - u) / dt + apply_symbol(_odd_power(v, m), lam)


def _residual_norm(F, dt, rho, h):
    """``‖dt F / ρ‖_{L²_ρ}``: the step residual in units of ``u``."""
    return float(np.sqrt(np.sum((dt * F) ** 2 / rho) * h))


def _solve_newton(u, dt, rho, lam, m, tol, max_iter, h):
    v = u.copy()
    F = _step_residual(v, u, dt, rho, lam, m)
    res = _residual_norm(F, dt, rho, h)
    shape = u.shape
    scale = dt * np.sqrt(h / rho).ravel()
    lam0 = float(np.mean(lam))
    for it in range(1, max_iter + 1):
        if res <= tol:
            return v, it - 1, res
        D = m * np.maximum(np.abs(v), JACOBIAN_FLOOR) ** (m - 1)
        diag = (rho / (dt * D)).ravel()

        def matvec(z, diag=diag):
            y = scale * z
            return scale * (diag * y + apply_symbol(y.reshape(shape), lam).ravel())

        A = LinearOperator((u.size, u.size), matvec=matvec, dtype=float)
        Pinv = 1.0 / (scale**2 * (diag + lam0))
        M = LinearOperator((u.size, u.size), matvec=lambda r: Pinv * r, dtype=float)
        z, info = cg(A, -scale * F.ravel(), rtol=0.0, atol=0.05 * tol, maxiter=2000, M=M)
        delta = (scale * z).reshape(shape) / D
        step = 1.0
        for _ in range(30):
            trial = v + step * delta
            Ft = _step_residual(trial, u, dt, rho, lam, m)
            rt = _residual_norm(Ft, dt, rho, h)
            if rt < res or rt <= tol:
                break
            step *= 0.5
        else:
            raise StepFailure(f"line search stalled at residual {res:.3e}")
        v, F, res = trial, Ft, rt
    if res <= tol:
        return v, max_iter, res
    raise StepFailure(f"Newton did not converge in {max_iter} iterations (residual {res:.3e})")


def step_implicit(state: StateField, dt: float, cfg: SolverConfig, rho: np.ndarray, grid: Grid) -> StateField:
    """One backward-Euler step ``ρ(u⁺-u)/dt + (-Δ)^s((u⁺)^m) = 0`` solved by Newton."""
    new, _ = _step(state.u, dt, cfg, rho, grid)
    return StateField(new, state.t + dt, cfg.m)


def _step(u, dt, cfg, rho, grid):
    if not dt > 0:
        raise ValueError("dt must be positive")
    lam = operator_symbol(grid, cfg.kernel_for(grid))
    v, iters, res = _solve_newton(u, dt, rho, lam, cfg.m, cfg.tol, cfg.max_newton, grid.cell_volume)
    vmin = float(v.min())
    if vmin < -cfg.tol:
        raise StepFailure(f"negative values down to {vmin:.3e} after convergence")
    return np.maximum(v, 0.0), {"newton": iters, "residual": res, "min_before_clip": vmin}


def integrate_density(u0: np.ndarray, grid: Grid, rho: np.ndarray, cfg: SolverConfig,
                      times: np.ndarray | None = None) -> tuple[list, list]:
    """March from ``u0`` through the nominal times, halving dt on failed steps."""
    times = cfg.time_grid() if times is None else np.asarray(times)
    u = np.array(u0, dtype=float)
    states = [StateField(u, float(times[0]), cfg.m)]
    step_log = []
    for k in range(len(times) - 1):
        t0, t1 = float(times[k]), float(times[k + 1])
        u, info = _advance(u, t0, t1, cfg, rho, grid, step_log)
        step_log.append({"t": t1, "dt": t1 - t0, **info})
        states.append(StateField(u, t1, cfg.m))
    return states, step_log


def _advance(u, t0, t1, cfg, rho, grid, step_log):
    pieces, halvings = 1, 0
    while True:
        try:
            v, newton, worst = u, 0, 0.0
            dt = (t1 - t0) / pieces
            for _ in range(pieces):
                v, info = _step(v, dt, cfg, rho, grid)
                newton += info["newton"]
                worst = max(worst, info["residual"])
            return v, {"newton": newton, "residual": worst, "halvings": halvings}
        except StepFailure as exc:
            halvings += 1
            log.debug("step at t=%g failed (%s); halving dt", t0, exc)
            if halvings > cfg.max_halvings:
                raise SolverAbort(f"step from t={t0:g} failed after {cfg.max_halvings} halvings: {exc}",
                                  step_log) from exc
            pieces *= 2


def evolve(mu: MeasureSpec, eps: float, cfg: SolverConfig, weight: WeightSpec, grid: Grid,
           times: np.ndarray | None = None) -> Trajectory:
    """Mollify ``mu`` at scale ``eps``, set ``u0 = μ_ε / ρ`` and integrate to ``T``."""
    weight.validate(grid.d, cfg.s)
    rho = eval_weight(weight, grid)
    if eps:
        dens = mollify_measure(mu, Mollifier(eps), grid)
    elif mu.atoms:
        raise ValueError("atoms need a positive mollification scale")
    else:
        dens = np.array(mu.density)
    states, step_log = integrate_density(dens / rho, grid, rho, cfg, times)
    return Trajectory(grid, tuple(states), rho, cfg, mu, weight, eps, tuple(step_log))


def evolve_density(u0: np.ndarray, cfg: SolverConfig, rho: np.ndarray, grid: Grid,
                   times: np.ndarray | None = None) -> Trajectory:
    states, step_log = integrate_density(u0, grid, rho, cfg, times)
    return Trajectory(grid, tuple(states), rho, cfg, step_log=tuple(step_log))


# ---------------------------------------------------------------- estimates


def _trapezoid(values, times):
    values, times = np.asarray(values), np.asarray(times)
    return float(np.sum(0.5 * (values[1:] + values[:-1]) * np.diff(times)))


def energy_report(traj: Trajectory, t1: float, t2: float, tol: float | None = None) -> DiagnosticsReport:
    """Residual of the energy identity on ``[t1, t2]`` and the ``z_t`` estimate.

    The bound for ``∫∫|z_t|²ρ`` uses ``C' = (m+1)/(4 m t1)``, obtained by testing
    the equation with ``(u^m)_t`` and using that the ``Ḣ^s`` energy of ``u^m`` decays.
    """
    if t1 <= 0:
        raise ValueError("energy estimates need t1 > 0")
    if not t2 > t1:
        raise ValueError("need t2 > t1")
    i1, i2 = traj.index_of(t1), traj.index_of(t2)
    grid, m, s, rho = traj.grid, traj.m, traj.cfg.s, traj.rho
    times = traj.times[i1:i2 + 1]
    dissip = [hs_seminorm(traj.states[i].pressure, grid, s) ** 2 for i in range(i1, i2 + 1)]
    energy = traj.energies() / (m + 1)
    dissipated = _trapezoid(dissip, times)
    drop = energy[i1] - energy[i2]
    residual = dissipated + energy[i2] - energy[i1]
    zs = np.stack([traj.states[i].z for i in range(i1, i2 + 1)])
    dts = np.diff(times)
    zt2 = float(np.sum(((np.diff(zs, axis=0) / dts.reshape(-1, *[1] * grid.d)) ** 2 * rho)
                       * dts.reshape(-1, *[1] * grid.d)) * grid.cell_volume)
    half = traj.times <= t1 / 2 + 1e-15
    j = int(np.nonzero(half)[0][-1]) if np.any(half) else 0
    zbound = (m + 1) / (4 * m * t1) * traj.energies()[j]
    increments = np.diff(traj.energies())
    results = {
        "dissipation_integral": dissipated,
        "energy_drop": drop,
        "identity_residual": residual,
        "relative_residual": abs(residual) / max(abs(drop), 1e-300),
        "zt_integral": zt2,
        "zt_bound": zbound,
        "zt_bound_margin": zbound - zt2,
        "max_energy_increment": float(increments.max(initial=-np.inf)) if len(increments) else 0.0,
        "bound_time": float(traj.times[j]),
    }
    limits = {"zt_bound_margin": ge(0.0), "max_energy_increment": le(0.0 if tol is None else tol)}
    if tol is not None:
        limits["relative_residual"] = le(tol)
    params = {"t1": t1, "t2": t2, "m": m, "s": s, "steps": int(i2 - i1)}
    return DiagnosticsReport("energy", params, results, limits)


def ut_radon_bound_check(traj: Trajectory, t: float, slack: float = 0.2) -> DiagnosticsReport:
    """Ratio of ``‖(u(t+dt)-u(t))/dt‖_{1,ρ}`` to ``2‖u0‖_{1,ρ}/((m-1)t)``."""
    i = traj.index_of(t)
    if i + 1 >= len(traj.states) or t <= 0:
        raise ValueError("need t > 0 with a recorded successor")
    st, nxt = traj.states[i], traj.states[i + 1]
    dt = nxt.t - st.t
    rate = weighted_norm((nxt.u - st.u) / dt, 1, traj.rho, traj.grid)
    mass0 = weighted_norm(traj.states[0].u, 1, traj.rho, traj.grid)
    bound = 2 * mass0 / ((traj.m - 1) * t)
    ratio = rate / bound if bound > 0 else 0.0
    return DiagnosticsReport("ut_radon_bound", {"t": t, "dt": dt, "m": traj.m},
                             {"rate": rate, "bound": bound, "ratio": ratio}, {"ratio": le(1 + slack)})


def contraction_check(u0: np.ndarray, v0: np.ndarray, cfg: SolverConfig, rho: np.ndarray, grid: Grid,
                      tol: float = 1e-8) -> DiagnosticsReport:
    """Evolve two data and check L¹_ρ contraction of the positive part and L^p_ρ decrease."""
    if np.any(u0 < 0) or np.any(v0 < 0):
        raise ValueError("data must be nonnegative")
    ta = evolve_density(u0, cfg, rho, grid)
    tb = evolve_density(v0, cfg, rho, grid)
    fa, fb = ta.fields(), tb.fields()
    h = grid.cell_volume
    axes = tuple(range(1, grid.d + 1))
    pos = np.sum(np.maximum(fa - fb, 0) * rho, axis=axes) * h
    neg = np.sum(np.maximum(fb - fa, 0) * rho, axis=axes) * h
    results = {
        "contraction_gap": float(max(np.max(pos - pos[0]), np.max(neg - neg[0]))),
        "contraction_step_increment": float(max(np.max(np.diff(pos), initial=0), np.max(np.diff(neg), initial=0))),
    }
    limits = {"contraction_gap": le(tol), "contraction_step_increment": le(tol)}
    for p in (1, 2, cfg.m + 1, np.inf):
        worst = -np.inf
        for f in (fa, fb):
            norms = np.array([weighted_norm(x, p, rho, grid) for x in f])
            worst = max(worst, float(np.max(np.diff(norms), initial=-np.inf)))
        key = f"lp_increment_p{'inf' if np.isinf(p) else f'{p:g}'}"
        results[key] = worst
        limits[key] = le(tol)
    flags = {}
    if np.all(u0 <= v0) or np.all(v0 <= u0):
        lo, hi = (fa, fb) if np.all(u0 <= v0) else (fb, fa)
        results["ordering_violation"] = float(np.max(lo - hi))
        limits["ordering_violation"] = le(tol)
    results["mass_drift"] = max(ta.mass_drift(), tb.mass_drift())
    params = {"m": cfg.m, "s": cfg.s, "T": cfg.T, "dt": cfg.dt, "steps": len(ta.states) - 1}
    return DiagnosticsReport("contraction", params, results, limits, flags)
