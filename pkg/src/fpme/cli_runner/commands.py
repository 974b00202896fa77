"""Pipelines behind each subcommand. Each returns its exit status."""
from __future__ import annotations

import csv
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from ..diagnostics import (INEQUALITY_COLUMNS, default_psi_bank, exponent_report, inequality_suite, initial_trace,
                           potential_report, potential_trajectory, sample_fields, smoothing_fit)
from ..domain_model import MeasureSpec, eval_weight, write_field_csv
from ..dual_linear import (WeightedOperator, build_coefficient, duality_identity_check, operator_report,
                           potential_difference, solve_dual)
from ..pme_solver import Trajectory, energy_report, evolve, ut_radon_bound_check
from ..report import DiagnosticsReport, le
from . import io
from .config import CHECK_DEFAULTS, CHECK_OWNER, SIMULATE_CHECKS, ExperimentConfig

log = logging.getLogger("fpme.cli")


def worker_count() -> int:
    """Worker cap for batch runs, from ``FPME_THREADS`` (default 1)."""
    raw = os.environ.get("FPME_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        log.warning("ignoring FPME_THREADS=%r", raw)
        return 1


def _nearest_index(times: np.ndarray, t: float) -> int:
    return int(np.argmin(np.abs(times - t)))


def _scaled_measure(mu: MeasureSpec, mass: float) -> MeasureSpec:
    f = mass / mu.total_mass
    dens = None if mu.density is None else mu.density * f
    return MeasureSpec(tuple((loc, m * f) for loc, m in mu.atoms), dens, mu.grid)


def _portable_config(cfg: ExperimentConfig, out: Path) -> dict:
    """Config document with any density file copied next to the outputs."""
    doc = json.loads(json.dumps(cfg.to_dict()))
    measure = doc["data"]["measure"]
    if isinstance(measure, dict) and measure.get("density_csv"):
        src = Path(measure["density_csv"])
        if not src.is_absolute() and cfg.base_dir is not None:
            src = cfg.base_dir / src
        shutil.copyfile(src, out / "initial_density.csv")
        measure["density_csv"] = "initial_density.csv"
    return doc


def mass_report(traj: Trajectory, tol: float) -> DiagnosticsReport:
    results = {"relative_drift": traj.mass_drift(), "initial_mass": traj.initial_mass}
    if traj.measure is not None:
        results["measure_mass"] = traj.measure.total_mass
        results["mollification_mass_error"] = abs(traj.initial_mass - traj.measure.total_mass)
    return DiagnosticsReport("mass", {"states": len(traj.states)}, results, {"relative_drift": le(tol)})


def radon_report(traj: Trajectory, window, slack: float) -> DiagnosticsReport:
    times = traj.times
    sel = [t for t in times[:-1] if window[0] - 1e-12 <= t <= window[1] + 1e-12 and t > 0]
    if not sel:
        raise ValueError("no recorded times inside the bound window")
    reps = [ut_radon_bound_check(traj, t, slack) for t in sel]
    ratios = np.array([r.results["ratio"] for r in reps])
    k = int(np.argmax(ratios))
    results = {"max_ratio": float(ratios[k]), "worst_time": float(sel[k]), "samples": len(sel)}
    return DiagnosticsReport("radon_bound", {"window": list(window), "slack": slack}, results,
                             {"max_ratio": le(1 + slack)}, series={"t": sel, "ratio": ratios.tolist()})


def _finish(out: Path, command: str, config: dict, rows: list[dict], **extra) -> int:
    io.write_summary(out / "summary.csv", rows)
    status = "pass" if all(r["status"] != "fail" for r in rows) else "fail"
    io.dump_json(out / "manifest.json", io.manifest(command, config, status=status,
                                                     checks=[r["check"] for r in rows], **extra))
    for row in rows:
        log.info("%-16s %-4s %s", row["check"], row["status"], row["detail"])
    return 0 if status == "pass" else 1


def simulate(cfg: ExperimentConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    grid = cfg.make_grid()
    traj = evolve(cfg.measure(grid), cfg.eps, cfg.solver_config(), cfg.weight(), grid)
    log.info("solved %d steps to t=%g", len(traj.states) - 1, traj.times[-1])
    rows, pt = [], None
    for name, opts in cfg.checks.items():
        if name not in SIMULATE_CHECKS:
            rows.append(io.summary_row(name, skip=f"run by the {CHECK_OWNER[name]} subcommand"))
            continue
        if name == "mass":
            rep = mass_report(traj, opts["tol"])
        elif name == "energy":
            t1 = float(traj.times[_nearest_index(traj.times, opts["t1"])])
            t2 = float(traj.times[_nearest_index(traj.times, opts["t2"])])
            rep = energy_report(traj, t1, t2)
        elif name == "radon_bound":
            rep = radon_report(traj, opts["window"], opts["slack"])
        elif name == "potential":
            pt = potential_trajectory(traj)
            rep = potential_report(pt, opts["tol"], tuple(opts["window"]))
        else:
            res = initial_trace(traj, early=opts["early"], tol=opts["tol"], mass_tol=opts["mass_tol"])
            rep = res.report
            _write_trace(out, res.measure, grid)
        io.write_report(out, rep, name)
        rows.append(io.summary_row(name, rep))

    keep = set(range(min(int(cfg.solver["keep_early"]), len(traj.states))))
    keep |= {_nearest_index(traj.times, t) for t in cfg.solver["output_times"]}
    keep.add(len(traj.states) - 1)
    states = io.write_states(out, grid, traj.states, keep)

    plots = out / "plots"
    io.write_plot(plots / "mass.dat", traj.times, traj.masses())
    io.write_plot(plots / "sup_norm.dat", traj.times, traj.sup_norms())
    io.write_plot(plots / "energy.dat", traj.times, traj.energies())
    potentials = pt.fields if pt is not None else traj.potentials
    row = (slice(None),) + (grid.origin_index,) * (grid.d - 1)
    for entry in states:
        io.write_plot(plots / f"potential_t{entry['index']:05d}.dat", grid.axis, potentials[entry["index"]][row])

    solver_stats = {"steps": len(traj.step_log), "newton_iterations": sum(s["newton"] for s in traj.step_log),
                    "halvings": sum(s["halvings"] for s in traj.step_log)}
    return _finish(out, "simulate", _portable_config(cfg, out), rows, states=states, solver=solver_stats)


def _write_trace(out: Path, measure: MeasureSpec, grid) -> dict:
    write_field_csv(out / "trace_density.csv", measure.density, grid, "density")
    doc = {**measure.to_json(), "density_csv": "trace_density.csv"}
    io.dump_json(out / "trace_measure.json", doc)
    return doc


def fit_exponents(cfg: ExperimentConfig, out: Path, masses=None) -> int:
    out.mkdir(parents=True, exist_ok=True)
    opts = cfg.checks.get("smoothing", CHECK_DEFAULTS["smoothing"])
    masses = [float(m) for m in (opts["masses"] if masses is None else masses)]
    grid = cfg.make_grid()
    base = cfg.measure(grid)
    scfg, weight = cfg.solver_config(), cfg.weight()

    def run(mass):
        return evolve(_scaled_measure(base, mass), cfg.eps, scfg, weight, grid)

    with ThreadPoolExecutor(max_workers=min(worker_count(), len(masses))) as pool:
        runs = list(pool.map(run, masses))
    fit = smoothing_fit(runs, masses, tuple(opts["window"]))
    rep = exponent_report(fit, opts["alpha_rel"], opts["beta_rel"], opts["residual_tol"])
    io.dump_json(out / "reports" / "exponent_fit.json", fit.to_dict())
    io.write_report(out, rep)
    drift = max(r.mass_drift() for r in runs)
    mrep = DiagnosticsReport("mass", {"runs": len(runs)}, {"relative_drift": drift},
                             {"relative_drift": le(cfg.checks.get("mass", CHECK_DEFAULTS["mass"])["tol"])})
    io.write_report(out, mrep)
    for mass, tr in zip(masses, runs):
        io.write_plot(out / "plots" / f"sup_norm_M{mass:g}.dat", tr.times, tr.sup_norms())
    print(json.dumps(io._plain(fit.to_dict()), indent=2, sort_keys=True))
    rows = [io.summary_row("smoothing", rep), io.summary_row("mass", mrep)]
    return _finish(out, "fit-exponents", _portable_config(cfg, out), rows, masses=masses)


def check_inequalities(cfg: ExperimentConfig, out: Path, count: int | None = None) -> int:
    out.mkdir(parents=True, exist_ok=True)
    opts = cfg.checks.get("inequalities", CHECK_DEFAULTS["inequalities"])
    count = int(opts["count"] if count is None else count)
    grid = cfg.make_grid(n=opts["n"], L=opts["L"])
    s, weight = float(cfg.problem["s"]), cfg.weight()
    rho = eval_weight(weight, grid, s)
    fields = sample_fields(grid, count, cfg.seed)
    rows, rep = inequality_suite(fields, grid, s, rho, weight.gamma, opts["qs"], opts["alpha"], opts["p"],
                                 opts["sv_tol"], opts["ckn_tol"])
    columns = ["index"] + [f"sv_gap_q{q:g}" for q in opts["qs"]] + list(INEQUALITY_COLUMNS[-3:])
    io.write_summary(out / "reports" / "inequalities.csv", rows, columns)
    io.write_report(out, rep)
    return _finish(out, "check-inequalities", _portable_config(cfg, out), [io.summary_row("inequalities", rep)],
                   samples=count)


def dual_diagnostics(cfg: ExperimentConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    opts = cfg.checks.get("dual", CHECK_DEFAULTS["dual"])
    grid = cfg.make_grid(n=opts["n"], L=opts["L"])
    s, weight = float(cfg.problem["s"]), cfg.weight()
    rho = eval_weight(weight, grid, s)
    op = WeightedOperator(grid, rho, s, cfg.solver["method"])
    op_rep = operator_report(op, opts["samples"], opts["semigroup_time"], cfg.seed)
    io.write_report(out, op_rep)

    T, h = float(opts["T"]), float(opts["h"])
    scfg = cfg.solver_config(T=T + h, dt=opts["dt"], uniform=True)
    mu = cfg.measure(grid)
    u1, u2 = (evolve(mu, e, scfg, weight, grid) for e in opts["eps_data"])
    coef = build_coefficient(u1, u2, h, opts["intervals"], T, opts["eps"])
    g = potential_difference(u1, u2, h, T)
    worst, mass_err = None, 0.0
    for psi in default_psi_bank(grid):
        dual = solve_dual(coef, psi, op)
        masses = dual.masses()
        mass_err = max(mass_err, float(np.max(np.abs(masses - masses[0])) / abs(masses[0])))
        rep = duality_identity_check(g, dual, coef, float(g.times[0]), opts["tol"])
        if worst is None or rep.results["identity_residual"] > worst.results["identity_residual"]:
            worst = rep
    io.write_report(out, worst)
    mrep = DiagnosticsReport("dual_mass", {"bank_size": len(default_psi_bank(grid))},
                             {"relative_mass_drift": mass_err}, {"relative_mass_drift": le(1e-9)})
    io.write_report(out, mrep)
    rows = [io.summary_row("weighted_operator", op_rep), io.summary_row("duality_identity", worst),
            io.summary_row("dual_mass", mrep)]
    return _finish(out, "dual-diagnostics", _portable_config(cfg, out), rows)


def trace(run_dir: Path, out: Path | None = None) -> int:
    run_dir = Path(run_dir)
    out = run_dir if out is None else out
    out.mkdir(parents=True, exist_ok=True)
    doc = json.loads((run_dir / "manifest.json").read_text())
    cfg = ExperimentConfig.from_dict(doc["config"], run_dir)
    grid = cfg.make_grid()
    entries = sorted(doc["states"], key=lambda e: e["index"])
    prefix = []
    for k, e in enumerate(entries):
        if e["index"] != k:
            break
        prefix.append(e)
    if len(prefix) < 3:
        raise ValueError("the run directory needs the first three solver states")
    opts = cfg.checks.get("trace", CHECK_DEFAULTS["trace"])
    weight = cfg.weight()
    states = io.read_states(run_dir, grid, prefix, float(cfg.problem["m"]))
    traj = Trajectory(grid, tuple(states), eval_weight(weight, grid), cfg.solver_config(), cfg.measure(grid),
                      weight, cfg.eps)
    res = initial_trace(traj, early=len(prefix), tol=opts["tol"], mass_tol=opts["mass_tol"])
    measure_doc = _write_trace(out, res.measure, grid)
    io.write_report(out, res.report)
    print(json.dumps({"measure": measure_doc, "certificate": res.report.to_dict()}, indent=2, sort_keys=True))
    return 0 if res.report.passed else 1


def report(run_dirs, out: Path | None = None) -> int:
    rows = []
    for d in run_dirs:
        path = Path(d) / "summary.csv"
        if not path.exists():
            rows.append({"run": str(d), "check": "-", "status": "skip", "detail": "no summary.csv"})
            continue
        rows.extend({"run": str(d), **r} for r in io.read_summary(path))
    columns = ("run",) + io.SUMMARY_COLUMNS
    if out is None:
        w = csv.DictWriter(sys.stdout, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        w.writerows({c: r.get(c, "") for c in columns} for r in rows)
    else:
        io.write_summary(out / "summary.csv", rows, columns)
    return 0 if all(r["status"] != "fail" for r in rows) else 1
