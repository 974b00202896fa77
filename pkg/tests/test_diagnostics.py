from dataclasses import replace

import numpy as np
import pytest

from fpme.diagnostics import (ckn_check, ckn_constant, ckn_exponent, default_psi_bank, exponent_report,
                              inequality_suite, initial_trace, potential_report, potential_trajectory,
                              sample_fields, smoothing_exponents, smoothing_fit, stroock_varopoulos_check,
                              uniqueness_gap, validate_exponent_regime)
from fpme.domain_model import HypothesisError, WeightSpec, eval_weight
from fpme.frac_ops import Grid
from fpme.pme_solver import SolverConfig, StateField, Trajectory, evolve


@pytest.mark.parametrize("d, s, m, gamma, expected", [
    (1, 0.4, 2.0, 0.0, (5 / 9, 4 / 9)),
    (1, 0.45, 2.0, 0.1, (0.9 / 1.7, 0.8 / 1.7)),
    (3, 0.5, 2.0, 0.0, (3 / 4, 1 / 4)),
])
def test_smoothing_exponents(d, s, m, gamma, expected):
    alpha, beta = smoothing_exponents(d, s, m, gamma)
    assert (alpha, beta) == pytest.approx(expected, rel=1e-14)
    assert alpha * (m - 1) + beta == pytest.approx(1.0, rel=1e-14)


def test_exponent_regime():
    validate_exponent_regime(1, 0.4, 2.0)
    with pytest.raises(HypothesisError):
        validate_exponent_regime(1, 0.6, 2.0)


def synthetic_run(mass, alpha, beta, times, s=0.4, m=2.0):
    g = Grid(1, 8, 1.0)
    bump = np.zeros(g.shape)
    bump[4] = 1.0
    states = tuple(StateField(bump * (mass**beta * t**-alpha if t > 0 else 1e6), t, m) for t in times)
    return Trajectory(g, states, np.ones(g.shape), SolverConfig(m, s, T=times[-1]))


def test_fit_recovers_exact_power_law():
    times = np.concatenate([[0.0], np.geomspace(1e-4, 0.2, 40)])
    runs = [synthetic_run(M, 5 / 9, 4 / 9, times) for M in (0.5, 1.0, 2.0, 4.0)]
    fit = smoothing_fit(runs, masses=[0.5, 1.0, 2.0, 4.0])
    assert fit.alpha_hat == pytest.approx(5 / 9, rel=1e-10)
    assert fit.beta_hat == pytest.approx(4 / 9, rel=1e-10)
    assert fit.residual < 1e-12
    rep = exponent_report(fit)
    assert rep.passed and rep.results["alpha_rel_error"] < 1e-10


def test_fit_flags_wrong_exponent():
    times = np.concatenate([[0.0], np.geomspace(1e-4, 0.2, 40)])
    runs = [synthetic_run(M, 0.8, 4 / 9, times) for M in (1.0, 2.0)]
    assert not exponent_report(smoothing_fit(runs, masses=[1.0, 2.0])).passed


def test_fit_input_checks():
    times = np.concatenate([[0.0], np.geomspace(1e-4, 0.2, 40)])
    run = synthetic_run(1.0, 0.5, 0.5, times)
    with pytest.raises(ValueError):
        smoothing_fit([run])
    with pytest.raises(ValueError):
        smoothing_fit([run, run], masses=[1.0, 1.0])
    with pytest.raises(ValueError):
        smoothing_fit([run, run], masses=[1.0, 2.0], window=(1e-2, 2e-2))


def test_potential_report_on_delta_run(delta_run, delta_grid, delta_config):
    rep = potential_report(potential_trajectory(delta_run), window=(0.05, 0.1))
    assert rep.passed, rep.summary_line()
    # the law U_t = -u^m sampled at the left end of each step is first-order consistent
    finer = evolve(delta_run.measure, delta_run.eps, replace(delta_config, subdivide=2), WeightSpec(), delta_grid)
    fine = potential_report(potential_trajectory(finer), window=(0.05, 0.1))
    ratio = rep.results["evolution_residual_max"] / fine.results["evolution_residual_max"]
    assert 1.7 < ratio < 2.3
    # the free-space convolution of the same states lies close to the consistent potential
    assert rep.results["free_space_gap"] < 0.05 * potential_trajectory(delta_run).fields.max()


def test_initial_trace(delta_run):
    res = initial_trace(delta_run)
    assert res.report.passed, res.report.summary_line()
    assert res.measure.total_mass == pytest.approx(1.0, abs=1e-10)
    again = initial_trace(delta_run)
    assert again.measure.total_mass == res.measure.total_mass
    assert np.array_equal(again.measure.density, res.measure.density)


@pytest.mark.parametrize("q", [1.5, 2.0, 3.0, 4.0])
def test_stroock_varopoulos(q):
    g = Grid(1, 512, 8.0)
    for v in sample_fields(g, 10, seed=3):
        rep = stroock_varopoulos_check(v, q, g, 0.4)
        assert rep.passed, rep.summary_line()


def test_stroock_varopoulos_input_checks():
    g = Grid(1, 16, 2.0)
    with pytest.raises(ValueError):
        stroock_varopoulos_check(np.ones(g.shape), 1.0, g, 0.4)
    with pytest.raises(ValueError):
        stroock_varopoulos_check(-np.ones(g.shape), 2.0, g, 0.4)


def test_ckn_exponent_and_homogeneity():
    # α = 0 reduces to the Sobolev exponent 2d/(d-2s)
    assert ckn_exponent(1, 0.4, 0.0, 1.0) == pytest.approx(2 / 0.2)
    g = Grid(1, 512, 8.0)
    rho = eval_weight(WeightSpec(gamma0=0.1, gamma=0.1), g)
    for v in sample_fields(g, 5, seed=4):
        rep = ckn_check(v, 1.0, 1.0, rho, g, 0.4, gamma=0.1)
        assert rep.passed and np.isfinite(rep.results["ratio"])
    with pytest.raises(ValueError):
        ckn_check(np.ones(g.shape), -1.0, 1.0, rho, g, 0.4)


def test_ckn_constant_is_stable():
    g = Grid(1, 512, 8.0)
    rep = ckn_constant(sample_fields(g, 60, seed=5), 1.0, 1.0, np.ones(g.shape), g, 0.4)
    assert rep.passed and rep.flags["finite"]
    assert np.all(np.diff(rep.series["running_max"]) >= 0)


def test_inequality_suite_rows():
    g = Grid(1, 256, 8.0)
    rows, rep = inequality_suite(sample_fields(g, 12, seed=6), g, 0.4, np.ones(g.shape))
    assert len(rows) == 12 and all(r["pass"] for r in rows)
    assert rep.passed and rep.results["failures"] == 0


def test_sample_fields_are_reproducible():
    g = Grid(2, 32, 4.0)
    a, b = sample_fields(g, 3, seed=9), sample_fields(g, 3, seed=9)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert all(f.min() >= 0 and f.shape == g.shape for f in a)


def test_psi_bank_is_nonnegative_and_compact():
    g = Grid(1, 256, 8.0)
    bank = default_psi_bank(g)
    assert len(bank) == 5
    for psi in bank:
        assert psi.min() >= 0 and psi.max() > 0 and np.all(psi[np.abs(g.axis) > 2] == 0)


def test_uniqueness_gap_vanishes_for_identical_runs(small_pair):
    u1, _ = small_pair
    rep = uniqueness_gap(u1, u1, 0.0, 0.1, ladder=())
    assert rep.results["max_abs_value"] == 0 and rep.passed


def test_uniqueness_gap_with_ladder(small_pair):
    u1, u2 = small_pair
    rep = uniqueness_gap(u1, u2, 0.01, 0.1, ladder=((8, 1e-2), (16, 3e-3)))
    rows = rep.series["ladder"]
    assert [r["n"] for r in rows] == [8, 16]
    assert all(r["identity_residual"] < 1e-9 for r in rows)
    assert rows[1]["eps_term"] < rows[0]["eps_term"]
    assert rep.flags["g_finite"]


def test_uniqueness_gap_input_checks(small_pair):
    u1, u2 = small_pair
    with pytest.raises(ValueError):
        uniqueness_gap(u1, u2, -0.01, 0.1, ladder=())
