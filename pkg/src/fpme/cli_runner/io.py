"""Run-directory layout: manifest, state CSVs, reports, summary and plot data."""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .. import __version__
from ..domain_model import read_field_csv, write_field_csv
from ..frac_ops import Grid
from ..pme_solver import StateField
from ..report import DiagnosticsReport, _plain

SUMMARY_COLUMNS = ("check", "status", "detail")


def dump_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_plain(doc), indent=2, sort_keys=True) + "\n")


def state_name(index: int) -> str:
    return f"state_t{index:05d}.csv"


def write_states(out: Path, grid: Grid, states: Sequence[StateField], indices: Iterable[int]) -> list[dict]:
    rows = []
    for i in sorted(set(indices)):
        write_field_csv(out / state_name(i), states[i].u, grid)
        rows.append({"index": i, "t": states[i].t, "file": state_name(i)})
    return rows


def read_states(run_dir: Path, grid: Grid, entries: Sequence[dict], m: float) -> list[StateField]:
    return [StateField(read_field_csv(run_dir / e["file"], grid), float(e["t"]), m) for e in entries]


def write_report(out: Path, report: DiagnosticsReport, name: str | None = None) -> Path:
    path = out / "reports" / f"{name or report.check}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json() + "\n")
    return path


def write_plot(path: Path, xs, ys) -> None:
    """Whitespace-separated two-column data."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for x, y in zip(np.asarray(xs).ravel(), np.asarray(ys).ravel()):
            fh.write(f"{float(x)!r} {float(y)!r}\n")


def summary_row(check: str, report: DiagnosticsReport | None = None, skip: str | None = None) -> dict:
    if report is None:
        return {"check": check, "status": "skip", "detail": skip or ""}
    detail = "; ".join(f"{k}={report.results[k]:.6g}" for k in report.limits
                       if isinstance(report.results.get(k), (int, float)))
    if report.failures:
        detail = "failed: " + ", ".join(report.failures) + ("; " + detail if detail else "")
    return {"check": check, "status": "pass" if report.passed else "fail", "detail": detail}


def write_summary(path: Path, rows: Sequence[dict], columns: Sequence[str] = SUMMARY_COLUMNS) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: row.get(k, "") for k in columns})


def read_summary(path: Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def manifest(command: str, config: dict, **extra) -> dict:
    return {"package": "fpme", "version": __version__, "command": command, "config": config, **extra}
