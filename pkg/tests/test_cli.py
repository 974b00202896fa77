import json
import subprocess
import sys

import pytest

from fpme.cli_runner import main
from fpme.cli_runner.config import ConfigError, ExperimentConfig, bundled_config, load_config
from fpme.cli_runner.io import read_summary


def bundled_doc():
    return json.loads(bundled_config().read_text())


def write_config(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["simulate", "--out", str(out)]) == 0
    return out


def test_bundled_config_loads():
    cfg = load_config(bundled_config())
    assert cfg.problem["s"] == 0.4 and cfg.grid["n"] == 4096
    assert set(cfg.checks) >= {"mass", "energy", "radon_bound", "potential", "trace"}
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("mutate, match", [
    (lambda d: d.update(extra=1), "unknown keys"),
    (lambda d: d["problem"].pop("s"), "missing s"),
    (lambda d: d["checks"].update(bogus={}), "unknown check"),
    (lambda d: d["checks"]["mass"].update(tolerance=1), "unknown keys"),
    (lambda d: d.update(seed=-1), "seed"),
    (lambda d: d["data"].update(eps=-0.1), "eps"),
    (lambda d: d["grid"].update(n=12), "power of two|even|n"),
])
def test_config_rejects(mutate, match):
    doc = bundled_doc()
    mutate(doc)
    with pytest.raises(ConfigError, match=match):
        ExperimentConfig.from_dict(doc)


def test_simulate_outputs(simulated):
    rows = read_summary(simulated / "summary.csv")
    status = {r["check"]: r["status"] for r in rows}
    assert {k for k, v in status.items() if v == "pass"} == {"mass", "energy", "radon_bound", "potential", "trace"}
    # checks owned by other subcommands are listed as skipped
    assert {k for k, v in status.items() if v == "skip"} == {"smoothing", "inequalities", "dual"}
    manifest = json.loads((simulated / "manifest.json").read_text())
    assert manifest["command"] == "simulate" and manifest["config"]["seed"] == 0
    states = sorted(p.name for p in simulated.glob("state_t*.csv"))
    assert states[0] == "state_t00000.csv" and len(states) >= 9
    for name in ("mass", "sup_norm", "energy"):
        assert (simulated / "plots" / f"{name}.dat").stat().st_size > 0
    assert list((simulated / "plots").glob("potential_t*.dat"))
    assert (simulated / "reports" / "energy.json").exists()


def test_simulate_is_deterministic(simulated, tmp_path):
    assert main(["simulate", "--out", str(tmp_path)]) == 0
    first = sorted(p.relative_to(simulated) for p in simulated.rglob("*") if p.is_file())
    second = sorted(p.relative_to(tmp_path) for p in tmp_path.rglob("*") if p.is_file())
    assert first == second
    for rel in first:
        assert (simulated / rel).read_bytes() == (tmp_path / rel).read_bytes(), rel


def test_trace_and_report(simulated, tmp_path, capsys):
    out = tmp_path / "trace"
    assert main(["trace", str(simulated), "--out", str(out)]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["measure"]["total_mass"] == pytest.approx(1.0, abs=1e-9)
    assert (out / "trace_density.csv").exists()
    assert main(["report", str(simulated), str(simulated)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("run") and len(lines) == 1 + 2 * 8


def test_hypothesis_violation_exits_2(tmp_path, capsys):
    doc = bundled_doc()
    doc["problem"].update(gamma=0.8, gamma0=0.8)
    assert main(["simulate", "--config", str(write_config(tmp_path, doc)), "--out", str(tmp_path / "o")]) == 2
    assert "γ ∈ [0,2s)" in capsys.readouterr().err


def test_missing_and_broken_config_exit_2(tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "nope.json")]) == 2
    (tmp_path / "bad.json").write_text("{")
    assert main(["simulate", "--config", str(tmp_path / "bad.json")]) == 2


def test_negative_seed_exits_2():
    assert main(["check-inequalities", "--seed", "-3"]) == 2


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["fit-exponents", "--masses", "a,b"],
                                  ["simulate", "--no-such-flag"], ["trace"]])
def test_usage_errors_exit_64(argv):
    assert main(argv) == 64


def test_solver_abort_exits_3(tmp_path, capsys):
    doc = bundled_doc()
    doc["grid"] = {"n": 256, "L": 8.0}
    doc["data"]["eps"] = 0.2
    doc["solver"].update(tol=1e-30, max_newton=2, max_halvings=1)
    out = tmp_path / "o"
    assert main(["simulate", "--config", str(write_config(tmp_path, doc)), "--out", str(out)]) == 3
    assert "solver aborted" in capsys.readouterr().err
    assert "steps" in json.loads((out / "step_log.json").read_text())


def test_failed_check_exits_1(tmp_path):
    doc = bundled_doc()
    doc["checks"] = {"mass": {"tol": 0.0}, "radon_bound": {"slack": -0.99}}
    out = tmp_path / "o"
    assert main(["simulate", "--config", str(write_config(tmp_path, doc)), "--out", str(out)]) == 1
    status = {r["check"]: r["status"] for r in read_summary(out / "summary.csv")}
    assert status["radon_bound"] == "fail"


def test_check_inequalities(tmp_path):
    out = tmp_path / "ineq"
    assert main(["check-inequalities", "--count", "10", "--seed", "3", "--out", str(out)]) == 0
    rows = read_summary(out / "reports" / "inequalities.csv")
    assert len(rows) == 10 and all(r["pass"] == "True" for r in rows)


def test_dual_diagnostics(tmp_path):
    out = tmp_path / "dual"
    assert main(["dual-diagnostics", "--out", str(out)]) == 0
    assert all(r["status"] == "pass" for r in read_summary(out / "summary.csv"))


def test_fit_exponents(tmp_path, capsys):
    out = tmp_path / "fit"
    assert main(["fit-exponents", "--masses", "0.5,1,2,4", "--out", str(out)]) == 0
    fit = json.loads(capsys.readouterr().out)
    assert fit["alpha"] == pytest.approx(5 / 9)
    assert abs(fit["alpha_hat"] / fit["alpha"] - 1) <= 0.10


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "fpme"], capture_output=True, text=True)
    assert proc.returncode == 64 and "usage" in proc.stderr
