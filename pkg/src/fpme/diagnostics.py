"""Potential monotonicity, initial traces, exponent fits and functional-inequality testers."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .domain_model import MeasureSpec, Mollifier, check_hypotheses, default_test_bank, weakstar_gap, weighted_norm
from .dual_linear import WeightedOperator, build_coefficient, duality_identity_check, potential_difference, solve_dual
from .frac_ops import FracKernelConfig, Grid, apply_frac_power, hs_seminorm, riesz_potential
from .pme_solver import Trajectory
from .report import DiagnosticsReport, ge, le, worst_node


def smoothing_exponents(d: int, s: float, m: float, gamma: float = 0.0, p0: float = 1.0) -> tuple[float, float]:
    """Time and mass exponents of the ``L^{p0}_ρ → L^∞`` smoothing effect."""
    denom = (m - 1) * (d - gamma) + (2 * s - gamma) * p0
    return (d - gamma) / denom, (2 * s - gamma) * p0 / denom


def validate_exponent_regime(d: int, s: float, m: float, gamma: float = 0.0, gamma0: float = 0.0):
    """Model hypotheses plus ``α(m-1) < 1``, which keeps the potential time integral finite."""
    check_hypotheses(d, s, m, gamma, gamma0)
    alpha, _ = smoothing_exponents(d, s, m, gamma)
    if not alpha * (m - 1) < 1:
        raise ValueError(f"α(m-1) = {alpha * (m - 1)} must be below 1")


# ------------------------------------------------------------------ potentials


@dataclass(frozen=True, eq=False)
class PotentialTrajectory:
    """Riesz potentials of ``ρ u(t)`` along a trajectory.

    ``fields`` are the potentials consistent with the periodic dynamics: the
    first one is the free-space ``I_{2s} * (ρ u(0))`` and later ones add the
    periodic inverse of ``ρ Δu`` together with the mean of ``-u^m dt``, the
    constant the periodic operator cannot see. ``free_fields`` are the plain
    free-space convolutions at every time; ``reference`` is the potential of the
    evolved data and ``measure_reference`` that of the unmollified measure.
    """

    grid: Grid
    times: np.ndarray
    fields: np.ndarray
    free_fields: np.ndarray
    reference: np.ndarray
    measure_reference: np.ndarray | None
    pressures: np.ndarray = field(repr=False)

    def monotonicity_violation(self) -> np.ndarray:
        """Nodewise worst increase ``max_k (U^{k+1} - U^k)_+``."""
        if len(self.times) < 2:
            return np.zeros(self.grid.shape)
        return np.max(np.maximum(np.diff(self.fields, axis=0), 0.0), axis=0)

    def squeeze_violation(self) -> np.ndarray:
        return np.max(np.maximum(self.fields - self.reference, 0.0), axis=0)

    def evolution_residuals(self) -> np.ndarray:
        """``‖(U^{k+1}-U^k)/dt + u^m(t_k)‖_{L²}`` for every step."""
        dts = np.diff(self.times).reshape(-1, *[1] * self.grid.d)
        rate = np.diff(self.fields, axis=0) / dts
        res = rate + self.pressures[:-1]
        axes = tuple(range(1, self.grid.d + 1))
        return np.sqrt(np.sum(res**2, axis=axes) * self.grid.cell_volume)


def potential_trajectory(traj: Trajectory) -> PotentialTrajectory:
    gamma = traj.weight.gamma if traj.weight is not None else 0.0
    grid, s, rho = traj.grid, traj.cfg.s, traj.rho
    if gamma > grid.d - 2 * s + 1e-15:
        raise ValueError(f"potentials need γ <= d-2s, got γ={gamma}")
    cfg = FracKernelConfig(s, grid.d)
    free = np.stack([riesz_potential(st.u * rho, grid, cfg) for st in traj.states])
    raw = riesz_potential(traj.measure, grid, cfg) if traj.measure is not None else None
    pressures = np.stack([st.pressure for st in traj.states])
    return PotentialTrajectory(grid, traj.times, traj.potentials, free, free[0].copy(), raw, pressures)


def potential_report(pt: PotentialTrajectory, tol: float = 1e-8, window: tuple[float, float] | None = None) -> DiagnosticsReport:
    """Positivity, monotone decrease in time, the squeeze below the reference and the evolution law."""
    mono = pt.monotonicity_violation()
    squeeze = pt.squeeze_violation()
    res = pt.evolution_residuals()
    if window is not None:
        sel = (pt.times[:-1] >= window[0]) & (pt.times[1:] <= window[1])
        res = res[sel]
    results = {
        "min_potential": float(pt.fields.min()),
        "monotonicity_violation": float(mono.max()),
        "squeeze_violation": float(squeeze.max()),
        "evolution_residual_max": float(res.max(initial=0.0)),
        "evolution_residual_mean": float(res.mean()) if res.size else 0.0,
    }
    results["free_space_gap"] = float(np.max(np.abs(pt.fields - pt.free_fields)))
    results["free_space_monotonicity_violation"] = float(np.max(np.maximum(np.diff(pt.free_fields, axis=0), 0.0),
                                                              initial=0.0))
    if pt.measure_reference is not None:
        results["reference_gap_to_measure"] = float(np.max(np.abs(pt.reference - pt.measure_reference)))
    limits = {"min_potential": ge(0.0), "monotonicity_violation": le(tol), "squeeze_violation": le(tol)}
    worst = {"monotonicity": worst_node(mono, pt.grid.coords), "squeeze": worst_node(squeeze, pt.grid.coords)}
    params = {"states": len(pt.times), "t_final": float(pt.times[-1])}
    return DiagnosticsReport("potential_monotonicity", params, results, limits, worst=worst)


# ---------------------------------------------------------------- initial trace


def _head(traj: Trajectory, k: int) -> Trajectory:
    return Trajectory(traj.grid, traj.states[:k], traj.rho, traj.cfg, traj.measure, traj.weight, traj.eps)


@dataclass(frozen=True, eq=False)
class TraceResult:
    measure: MeasureSpec
    report: DiagnosticsReport


def initial_trace(traj: Trajectory, testbank=None, early: int = 8, tol: float = 1e-6,
                  mass_tol: float = 1e-3) -> TraceResult:
    """Recover the initial measure as the earliest state's ``ρ u`` with a convergence certificate.

    The certificate asks that the weak-star gap to the earliest state shrink as
    ``t_k ↓ 0`` and that the potentials increase towards the reference potential.
    """
    if len(traj.states) < 3:
        raise ValueError("need at least 3 recorded states")
    grid, rho = traj.grid, traj.rho
    bank = default_test_bank(grid.d, grid.L) if testbank is None else testbank
    k = min(early, len(traj.states))
    meas = [MeasureSpec(density=traj.states[i].u * rho, grid=grid) for i in range(k)]
    gaps = np.array([weakstar_gap(meas[i], meas[0], bank) for i in range(1, k)])
    gap_increase = float(np.max(np.maximum(-np.diff(gaps), 0.0), initial=0.0))
    pots = potential_trajectory(_head(traj, k)).fields
    ref = pots[0]
    monotone = float(np.max(np.maximum(np.diff(pots, axis=0), 0.0), initial=0.0))
    squeeze = float(np.max(np.maximum(pots - ref, 0.0)))
    trace = meas[0]
    ledger = traj.initial_mass
    results = {
        "trace_mass": trace.total_mass,
        "ledger_mass": ledger,
        "mass_error": abs(trace.total_mass - ledger),
        "gap_sequence_increase": gap_increase,
        "earliest_gap": float(gaps[0]) if gaps.size else 0.0,
        "potential_monotonicity_violation": monotone,
        "potential_squeeze_violation": squeeze,
        "trace_time": float(traj.times[0]),
    }
    if traj.measure is not None:
        results["measure_mass_error"] = abs(trace.total_mass - traj.measure.total_mass)
    limits = {
        "mass_error": le(mass_tol),
        "gap_sequence_increase": le(1e-12),
        "potential_monotonicity_violation": le(tol),
        "potential_squeeze_violation": le(tol),
    }
    params = {"early_states": k, "bank_size": len(bank)}
    return TraceResult(trace, DiagnosticsReport("initial_trace", params, results, limits,
                                                series={"gaps": gaps.tolist()}))


# ---------------------------------------------------------------- exponent fit


@dataclass(frozen=True)
class ExponentFit:
    alpha_hat: float
    beta_hat: float
    window: tuple[float, float]
    residual: float
    alpha: float
    beta: float
    t_star: float
    masses: tuple
    run_alphas: tuple
    run_residuals: tuple

    def to_dict(self) -> dict:
        return {
            "alpha_hat": self.alpha_hat, "beta_hat": self.beta_hat, "alpha": self.alpha, "beta": self.beta,
            "window": list(self.window), "residual": self.residual, "t_star": self.t_star,
            "masses": list(self.masses), "run_alphas": list(self.run_alphas),
            "run_residuals": list(self.run_residuals),
        }


def _log_sup_at(traj: Trajectory, t: float) -> float:
    tt, sup = traj.times[1:], traj.sup_norms()[1:]
    return float(np.interp(np.log(t), np.log(tt), np.log(sup)))


def smoothing_fit(runs: Sequence[Trajectory], masses: Sequence[float] | None = None,
                  window: tuple[float, float] = (1e-3, 1e-1), t_star: float | None = None) -> ExponentFit:
    """Fit ``log‖u(t)‖_∞ = c_i - α log t`` jointly over runs (one intercept per mass).

    ``β̂`` is the slope of ``log‖u(t*)‖_∞`` against ``log M`` at ``t*``
    (default: geometric mean of the window).
    """
    lo, hi = window
    if not (0 < lo < hi) or np.log10(hi / lo) < 0.5:
        raise ValueError("fit window must be positive and span at least half a decade")
    if len(runs) < 2:
        raise ValueError("need at least two runs")
    masses = [r.initial_mass for r in runs] if masses is None else list(masses)
    if len(set(np.round(masses, 12))) < 2:
        raise ValueError("need at least two distinct masses")
    cols, ys, run_alpha, run_res = [], [], [], []
    for i, tr in enumerate(runs):
        tt, sup = tr.times, tr.sup_norms()
        sel = (tt >= lo * (1 - 1e-12)) & (tt <= hi * (1 + 1e-12))
        if np.count_nonzero(sel) < 3:
            raise ValueError(f"run {i} has fewer than 3 states in the window")
        x, y = np.log(tt[sel]), np.log(sup[sel])
        slope, icpt = np.polyfit(x, y, 1)
        run_alpha.append(float(-slope))
        run_res.append(float(np.sqrt(np.mean((y - slope * x - icpt) ** 2))))
        cols.append((i, x))
        ys.append(y)
    n_pts = sum(len(x) for _, x in cols)
    design = np.zeros((n_pts, 1 + len(runs)))
    row = 0
    for i, x in cols:
        design[row:row + len(x), 0] = x
        design[row:row + len(x), 1 + i] = 1.0
        row += len(x)
    y = np.concatenate(ys)
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    residual = float(np.sqrt(np.mean((design @ coef - y) ** 2)))
    t_star = float(np.sqrt(lo * hi)) if t_star is None else t_star
    beta_hat = float(np.polyfit(np.log(masses), [_log_sup_at(r, t_star) for r in runs], 1)[0])
    tr0 = runs[0]
    gamma = tr0.weight.gamma if tr0.weight is not None else 0.0
    alpha, beta = smoothing_exponents(tr0.grid.d, tr0.cfg.s, tr0.m, gamma)
    return ExponentFit(float(-coef[0]), beta_hat, (lo, hi), residual, alpha, beta, t_star,
                       tuple(float(m) for m in masses), tuple(run_alpha), tuple(run_res))


def exponent_report(fit: ExponentFit, alpha_rel: float = 0.10, beta_rel: float | None = 0.15,
                    residual_tol: float = 0.02) -> DiagnosticsReport:
    results = {
        "alpha_hat": fit.alpha_hat, "alpha": fit.alpha,
        "alpha_rel_error": abs(fit.alpha_hat / fit.alpha - 1),
        "beta_hat": fit.beta_hat, "beta": fit.beta,
        "beta_rel_error": abs(fit.beta_hat / fit.beta - 1),
        "regression_residual": fit.residual,
        "worst_run_residual": max(fit.run_residuals),
    }
    limits = {"alpha_rel_error": le(alpha_rel), "regression_residual": le(residual_tol)}
    if beta_rel is not None:
        limits["beta_rel_error"] = le(beta_rel)
    params = {"window": list(fit.window), "t_star": fit.t_star, "masses": list(fit.masses)}
    return DiagnosticsReport("smoothing_exponents", params, results, limits)


# -------------------------------------------------------- functional inequalities


def stroock_varopoulos_check(v: np.ndarray, q: float, grid: Grid, s: float, tol: float = 1e-9) -> DiagnosticsReport:
    """``∫ v^{q-1}(-Δ)^s v - 4(q-1)/q² ‖(-Δ)^{s/2} v^{q/2}‖²`` (should be >= 0)."""
    if not q > 1:
        raise ValueError("q must exceed 1")
    v = np.asarray(v, dtype=float)
    if np.any(v < 0):
        raise ValueError("field must be nonnegative")
    Lv = apply_frac_power(v, grid, FracKernelConfig(s, grid.d))
    lhs = float(np.sum(v ** (q - 1) * Lv) * grid.cell_volume)
    rhs = 4 * (q - 1) / q**2 * hs_seminorm(v ** (q / 2), grid, s) ** 2
    gap = lhs - rhs
    limits = {"gap": ge(-tol)}
    if q == 2:
        limits["abs_gap"] = le(1e-10)
    return DiagnosticsReport("stroock_varopoulos", {"q": q, "s": s},
                             {"lhs": lhs, "rhs": rhs, "gap": gap, "abs_gap": abs(gap)}, limits)


def ckn_exponent(d: int, s: float, alpha: float, p: float, gamma: float = 0.0) -> float:
    return 2 * (d - gamma) * (alpha + 1) / ((d - gamma) * alpha / p + d - 2 * s)


def ckn_ratio(v: np.ndarray, alpha: float, p: float, rho: np.ndarray, grid: Grid, s: float,
              gamma: float = 0.0) -> float:
    """``‖v‖_{q,ρ} / (‖(-Δ)^{s/2}v‖₂^{1/(α+1)} ‖v‖_{p,ρ}^{α/(α+1)})``, 0 for ``v ≡ 0``."""
    q = ckn_exponent(grid.d, s, alpha, p, gamma)
    num = weighted_norm(v, q, rho, grid)
    if num == 0:
        return 0.0
    den = hs_seminorm(v, grid, s) ** (1 / (alpha + 1)) * weighted_norm(v, p, rho, grid) ** (alpha / (alpha + 1))
    return float(num / den) if den > 0 else float("inf")


def ckn_check(v: np.ndarray, alpha: float, p: float, rho: np.ndarray, grid: Grid, s: float,
              gamma: float = 0.0, scales: Sequence[float] = (0.1, 10.0), tol: float = 1e-10) -> DiagnosticsReport:
    """Ratio of the interpolation inequality and its invariance under ``v ↦ λv``."""
    if alpha < 0 or p < 1:
        raise ValueError("need alpha >= 0 and p >= 1")
    base = ckn_ratio(v, alpha, p, rho, grid, s, gamma)
    drift = max((abs(ckn_ratio(lam * v, alpha, p, rho, grid, s, gamma) - base) / max(base, 1e-300)
                 for lam in scales), default=0.0)
    results = {"ratio": base, "q": ckn_exponent(grid.d, s, alpha, p, gamma), "homogeneity_error": drift}
    return DiagnosticsReport("ckn", {"alpha": alpha, "p": p, "s": s, "gamma": gamma}, results,
                             {"homogeneity_error": le(tol)})


def ckn_constant(fields: Sequence[np.ndarray], alpha: float, p: float, rho: np.ndarray, grid: Grid, s: float,
                 gamma: float = 0.0, growth_tol: float = 0.25) -> DiagnosticsReport:
    """Running maximum of the ratio over a sample bank (the empirical constant).

    It counts as stable when the second half of the bank raises the first half's
    maximum by at most ``growth_tol`` (relative).
    """
    ratios = np.array([ckn_ratio(f, alpha, p, rho, grid, s, gamma) for f in fields])
    running = np.maximum.accumulate(ratios)
    half = len(ratios) // 2
    growth = float(running[-1] / running[half - 1] - 1) if half else 0.0
    results = {"constant": float(running[-1]), "growth_second_half": growth, "samples": len(ratios),
               "finite": bool(np.all(np.isfinite(ratios)))}
    return DiagnosticsReport("ckn_constant", {"alpha": alpha, "p": p, "s": s, "gamma": gamma}, results,
                             {"growth_second_half": le(growth_tol)}, {"finite": results["finite"]},
                             series={"running_max": running.tolist()})


def sample_fields(grid: Grid, count: int, seed: int = 0) -> list[np.ndarray]:
    """Random nonnegative sums of one to four Gaussian bumps inside the box."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        f = np.zeros(grid.shape)
        for _ in range(int(rng.integers(1, 5))):
            centre = rng.uniform(-grid.L / 2, grid.L / 2, grid.d)
            width = rng.uniform(0.2, 0.2 * grid.L)
            r2 = sum((x - c) ** 2 for x, c in zip(grid.coords, centre))
            f += rng.uniform(0.1, 3.0) * np.exp(-r2 / (2 * width**2))
        out.append(f)
    return out


INEQUALITY_COLUMNS = ("index", "sv_gap_q1.5", "sv_gap_q2", "sv_gap_q3", "ckn_ratio", "ckn_homogeneity_error", "pass")


def inequality_suite(fields: Sequence[np.ndarray], grid: Grid, s: float, rho: np.ndarray, gamma: float = 0.0,
                     qs: Sequence[float] = (1.5, 2.0, 3.0), alpha: float = 1.0, p: float = 1.0,
                     sv_tol: float = 1e-9, ckn_tol: float = 1e-10) -> tuple[list[dict], DiagnosticsReport]:
    """Stroock-Varopoulos and interpolation checks for every field, one row each."""
    rows = []
    for i, v in enumerate(fields):
        sv = [stroock_varopoulos_check(v, q, grid, s, sv_tol) for q in qs]
        ckn = ckn_check(v, alpha, p, rho, grid, s, gamma, tol=ckn_tol)
        row = {"index": i}
        row.update({f"sv_gap_q{q:g}": rep.results["gap"] for q, rep in zip(qs, sv)})
        row["ckn_ratio"] = ckn.results["ratio"]
        row["ckn_homogeneity_error"] = ckn.results["homogeneity_error"]
        row["pass"] = all(rep.passed for rep in sv) and ckn.passed
        rows.append(row)
    constant = ckn_constant(fields, alpha, p, rho, grid, s, gamma)
    failures = sum(not r["pass"] for r in rows)
    results = {
        "samples": len(rows),
        "failures": failures,
        "min_sv_gap": min(min(r[f"sv_gap_q{q:g}"] for q in qs) for r in rows),
        "max_ckn_homogeneity_error": max(r["ckn_homogeneity_error"] for r in rows),
        **{f"ckn_{k}": v for k, v in constant.results.items()},
    }
    limits = {"failures": le(0), "ckn_growth_second_half": constant.limits["growth_second_half"]}
    params = {"s": s, "gamma": gamma, "qs": list(qs), "alpha": alpha, "p": p, "n": grid.n, "d": grid.d}
    return rows, DiagnosticsReport("inequalities", params, results, limits, {"ckn_finite": constant.results["finite"]})


# ------------------------------------------------------------- uniqueness gap


def default_psi_bank(grid: Grid) -> list[np.ndarray]:
    """Five compactly supported smooth bumps at distinct centres and widths."""
    specs = [(0.0, 0.5), (0.6, 0.3), (-0.8, 0.4), (0.3, 0.8), (-0.4, 0.25)]
    bank = []
    for c, w in specs:
        centre = np.array([c] + [0.5 * c] * (grid.d - 1))
        r = np.sqrt(sum((x - a) ** 2 for x, a in zip(grid.coords, centre)))
        bank.append(Mollifier.shape(r / w))
    return bank


def uniqueness_gap(u1: Trajectory, u2: Trajectory, h: float, T: float, psi_bank=None,
                   ladder: Sequence[tuple[int, float]] = ((8, 1e-2), (16, 3e-3), (32, 1e-3)),
                   smoothing: float = 2.0, tol: float = 1e-5) -> DiagnosticsReport:
    """Test ``g(T) = U2(T+h) - U1(T)`` against nonnegative bumps, and run the dual ladder.

    The tested value uses the scheme-consistent potentials (the ones the duality
    identity is exact for); the plain free-space convolutions are reported
    alongside. The ladder reports, for each ``(n, ε)``, the ε-term and the
    coefficient-approximation term of the duality identity with its residual.
    """
    if u1.grid != u2.grid:
        raise ValueError("trajectories live on different grids")
    if h < 0:
        raise ValueError("h must be nonnegative")
    grid, rho = u1.grid, u1.rho
    if not np.allclose(rho, u2.rho):
        raise ValueError("trajectories use different weights")
    bank = default_psi_bank(grid) if psi_bank is None else list(psi_bank)
    cfg = FracKernelConfig(u1.cfg.s, grid.d)
    g_T = u2.potentials[u2.index_of(T + h)] - u1.potentials[u1.index_of(T)]
    free_T = riesz_potential(u2.state_at(T + h).u * rho, grid, cfg) - riesz_potential(u1.state_at(T).u * rho, grid, cfg)
    values = [float(np.sum(g_T * psi * rho) * grid.cell_volume) for psi in bank]
    free_values = [float(np.sum(free_T * psi * rho) * grid.cell_volume) for psi in bank]
    g = potential_difference(u1, u2, h, T) if ladder else None
    base = WeightedOperator(grid, rho, u1.cfg.s, u1.cfg.method)
    ladder_rows = []
    for n, eps in ladder:
        coef = build_coefficient(u1, u2, h, n, T, eps, smoothing)
        worst = {"identity_residual": 0.0, "eps_term": 0.0, "approximation_term": 0.0}
        for psi in bank:
            rep = duality_identity_check(g, solve_dual(coef, psi, base), coef, float(g.times[0]))
            for key in worst:
                worst[key] = max(worst[key], abs(rep.results[key]))
        ladder_rows.append({"n": n, "eps": eps, **worst})
    results = {
        "max_value": max(values),
        "min_value": min(values),
        "max_abs_value": max(abs(v) for v in values),
        "free_space_max_value": max(free_values),
        "g_sup": float(np.max(np.abs(g_T))),
        "g_finite": bool(np.all(np.isfinite(g_T))),
    }
    limits = {"max_value": le(tol)}
    params = {"h": h, "T": T, "bank_size": len(bank), "ladder": [list(x) for x in ladder], "smoothing": smoothing}
    return DiagnosticsReport("uniqueness_gap", params, results, limits, {"g_finite": results["g_finite"]},
                             series={"values": values, "ladder": ladder_rows})
