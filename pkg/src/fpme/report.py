"""Uniform container for diagnostic outcomes."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np


def _plain(value: Any) -> Any:
    """Convert numpy scalars/arrays and tuples into JSON-friendly values."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        v = float(value)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return value


@dataclass(frozen=True)
class Limit:
    """A bound on one named result: ``kind`` is ``"le"``, ``"ge"`` or ``"between"``."""

    kind: str
    bound: float | tuple[float, float]

    def holds(self, value: float) -> bool:
        if value is None or (isinstance(value, float) and math.isnan(value)):
            return False
        if self.kind == "le":
            return value <= self.bound
        if self.kind == "ge":
            return value >= self.bound
        lo, hi = self.bound
        return lo <= value <= hi

    def describe(self) -> str:
        if self.kind == "between":
            return f"in [{self.bound[0]:g}, {self.bound[1]:g}]"
        return f"{'<=' if self.kind == 'le' else '>='} {self.bound:g}"


def le(bound: float) -> Limit:
    return Limit("le", float(bound))


def ge(bound: float) -> Limit:
    return Limit("ge", float(bound))


def between(lo: float, hi: float) -> Limit:
    return Limit("between", (float(lo), float(hi)))


@dataclass
class DiagnosticsReport:
    """Named results of one verification.

    ``passed`` is true exactly when every limited result satisfies its limit
    (and every entry of ``flags`` is true).
    """

    check: str
    parameters: dict
    results: dict
    limits: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)
    worst: dict = field(default_factory=dict)
    series: dict = field(default_factory=dict)

    @property
    def failures(self) -> list[str]:
        bad = [name for name, lim in self.limits.items() if not lim.holds(self.results.get(name))]
        bad += [name for name, ok in self.flags.items() if not ok]
        return bad

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        doc = {
            "check": self.check,
            "parameters": self.parameters,
            "residuals": self.results,
            "flags": self.flags,
            "worst": self.worst,
            "pass": self.passed,
            "tolerance": {k: {"kind": v.kind, "bound": v.bound} for k, v in self.limits.items()},
        }
        if self.series:
            doc["series"] = self.series
        return _plain(doc)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def summary_line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        parts = []
        for name, lim in self.limits.items():
            parts.append(f"{name}={_fmt(self.results.get(name))} ({lim.describe()})")
        for name, ok in self.flags.items():
            parts.append(f"{name}={'ok' if ok else 'failed'}")
        return f"[{status}] {self.check}: " + "; ".join(parts)


def _fmt(v: Any) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.4g}"
    return str(v)


def worst_node(violation: np.ndarray, coords: tuple[np.ndarray, ...]) -> dict:
    """Location and size of the largest entry of a violation field."""
    idx = np.unravel_index(int(np.argmax(violation)), violation.shape)
    return {"value": float(violation[idx]), "node": [float(c[idx]) for c in coords]}
