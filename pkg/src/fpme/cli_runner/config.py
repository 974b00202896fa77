"""Experiment configuration: one JSON document, validated before anything runs."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from ..domain_model import HypothesisError, MeasureSpec, WeightSpec, check_hypotheses
from ..frac_ops import Grid
from ..pme_solver import SolverConfig


class ConfigError(ValueError):
    """The configuration cannot be used; the message says why."""


CHECK_DEFAULTS = {
    "mass": {"tol": 1e-8},
    "energy": {"t1": 0.01, "t2": 0.1},
    "radon_bound": {"window": [0.01, 0.1], "slack": 0.2},
    "potential": {"tol": 1e-8, "window": [0.01, 0.1]},
    "trace": {"early": 8, "tol": 1e-6, "mass_tol": 1e-3},
    "smoothing": {"masses": [0.5, 1.0, 2.0, 4.0], "window": [1e-3, 1e-1], "alpha_rel": 0.10, "beta_rel": 0.15,
                  "residual_tol": 0.02},
    "inequalities": {"count": 100, "n": 512, "L": 8.0, "qs": [1.5, 2.0, 3.0], "alpha": 1.0, "p": 1.0,
                     "sv_tol": 1e-9, "ckn_tol": 1e-10},
    "dual": {"n": 256, "L": 8.0, "eps_data": [0.125, 0.25], "dt": 1e-3, "T": 0.1, "h": 0.0, "intervals": 32,
             "eps": 1e-3, "samples": 50, "tol": 1e-6, "semigroup_time": 0.05},
}
SIMULATE_CHECKS = ("mass", "energy", "radon_bound", "potential", "trace")
CHECK_OWNER = {"smoothing": "fit-exponents", "inequalities": "check-inequalities", "dual": "dual-diagnostics"}

PROBLEM_KEYS = {"d", "s", "m", "gamma0", "gamma", "c", "C", "profile", "eta"}
SOLVER_KEYS = {"T", "dt", "dt0", "ramp", "tol", "max_newton", "max_halvings", "method", "output_times", "keep_early"}


def _require(block: dict, keys: tuple, where: str):
    missing = [k for k in keys if k not in block]
    if missing:
        raise ConfigError(f"{where}: missing {', '.join(missing)}")


def _reject_unknown(block: dict, allowed: set, where: str):
    extra = sorted(set(block) - allowed)
    if extra:
        raise ConfigError(f"{where}: unknown keys {', '.join(extra)}")


@dataclass(frozen=True)
class ExperimentConfig:
    problem: dict
    grid: dict
    data: dict
    solver: dict
    checks: dict
    seed: int = 0
    base_dir: Path | None = field(default=None, compare=False)

    @classmethod
    def from_dict(cls, doc: dict, base_dir: Path | None = None) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("configuration must be a JSON object")
        _reject_unknown(doc, {"problem", "grid", "data", "solver", "checks", "seed"}, "config")
        for key in ("problem", "grid", "data", "solver"):
            if not isinstance(doc.get(key), dict):
                raise ConfigError(f"config: block {key!r} is required")
        problem = {"gamma0": 0.0, "gamma": 0.0, "c": 1.0, "C": 1.0, "profile": "pure_power", "eta": 0.0,
                   **doc["problem"]}
        _require(problem, ("d", "s", "m"), "problem")
        _reject_unknown(problem, PROBLEM_KEYS, "problem")
        _require(doc["grid"], ("n", "L"), "grid")
        _reject_unknown(doc["grid"], {"n", "L"}, "grid")
        data = dict(doc["data"])
        _require(data, ("measure",), "data")
        _reject_unknown(data, {"measure", "eps"}, "data")
        solver = {"dt0": None, "ramp": 1.1, "tol": 1e-10, "max_newton": 60, "max_halvings": 20,
                  "method": "spectral", "output_times": [], "keep_early": 8, **doc["solver"]}
        _require(solver, ("T", "dt"), "solver")
        _reject_unknown(solver, SOLVER_KEYS, "solver")
        raw_checks = doc.get("checks", {name: {} for name in SIMULATE_CHECKS})
        if isinstance(raw_checks, list):
            raw_checks = {name: {} for name in raw_checks}
        checks = {}
        for name, overrides in raw_checks.items():
            if name not in CHECK_DEFAULTS:
                raise ConfigError(f"checks: unknown check {name!r}; known: {', '.join(CHECK_DEFAULTS)}")
            _reject_unknown(overrides, set(CHECK_DEFAULTS[name]), f"checks.{name}")
            checks[name] = {**copy.deepcopy(CHECK_DEFAULTS[name]), **overrides}
        seed = doc.get("seed", 0)
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        cfg = cls(problem, dict(doc["grid"]), data, solver, checks, seed, base_dir)
        cfg.validate()
        return cfg

    def validate(self):
        """Build every component once so that bad values fail before a run starts."""
        p = self.problem
        try:
            check_hypotheses(int(p["d"]), float(p["s"]), float(p["m"]), float(p["gamma"]), float(p["gamma0"]))
            self.weight()
            grid = self.make_grid()
            self.solver_config()
            self.measure(grid)
        except HypothesisError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc
        if grid.d != int(p["d"]):
            raise ConfigError("grid dimension does not match problem.d")
        eps = self.data.get("eps")
        if eps is not None and not eps > 0:
            raise ConfigError("data.eps must be positive")

    def to_dict(self) -> dict:
        return {"problem": self.problem, "grid": self.grid, "data": self.data, "solver": self.solver,
                "checks": self.checks, "seed": self.seed}

    def weight(self) -> WeightSpec:
        return WeightSpec.from_mapping(self.problem)

    def make_grid(self, n: int | None = None, L: float | None = None) -> Grid:
        return Grid(int(self.problem["d"]), int(self.grid["n"] if n is None else n),
                    float(self.grid["L"] if L is None else L))

    def solver_config(self, T: float | None = None, dt: float | None = None, uniform: bool = False) -> SolverConfig:
        s = self.solver
        return SolverConfig(m=float(self.problem["m"]), s=float(self.problem["s"]), T=float(s["T"] if T is None else T),
                            dt=float(s["dt"] if dt is None else dt), dt0=None if uniform else s["dt0"],
                            ramp=float(s["ramp"]), tol=float(s["tol"]), max_newton=int(s["max_newton"]),
                            max_halvings=int(s["max_halvings"]), method=s["method"])

    def measure(self, grid: Grid) -> MeasureSpec:
        return MeasureSpec.from_json(self.data["measure"], grid, self.base_dir)

    @property
    def eps(self) -> float | None:
        return self.data.get("eps")


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return ExperimentConfig.from_dict(doc, path.parent)


def bundled_config(name: str = "delta_d1.json") -> Path:
    """Path of a configuration shipped with the package."""
    return Path(str(resources.files("fpme") / "configs" / name))
