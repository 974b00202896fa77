import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fpme.domain_model import (HypothesisError, MeasureSpec, Mollifier, WeightSpec, check_hypotheses,
                               default_test_bank, eval_weight, mollify_measure, read_field_csv, weakstar_gap,
                               weight_band_violation, weighted_norm, write_field_csv)
from fpme.frac_ops import Grid, cell_average_power


@pytest.mark.parametrize("d, s, m, gamma, gamma0, clause", [
    (1, 0.5, 2.0, 0.0, 0.0, "d > 2s"),
    (1, 0.4, 2.0, 0.8, 0.0, "γ ∈ [0,2s)"),
    (1, 0.4, 2.0, 0.3, 0.0, "γ ∈ [0,d-2s]"),
    (2, 0.5, 2.0, 0.5, 0.6, "γ0 ∈ [0,γ]"),
    (2, 0.5, 1.0, 0.0, 0.0, "m > 1"),
    (2, 1.0, 2.0, 0.0, 0.0, "s ∈ (0,1)"),
])
def test_hypothesis_clauses(d, s, m, gamma, gamma0, clause):
    with pytest.raises(HypothesisError) as info:
        check_hypotheses(d, s, m, gamma, gamma0)
    assert info.value.clause == clause


def test_admissible_parameters_pass():
    check_hypotheses(1, 0.4, 2.0, 0.2, 0.1)
    check_hypotheses(2, 0.75, 1.5, 0.5, 0.5)
    check_hypotheses(3, 0.9, 3.0, 1.2, 0.0)


def test_weight_values():
    g = Grid(1, 16, 4.0)
    rho = eval_weight(WeightSpec(gamma0=0.5, gamma=0.5), g)
    assert rho[g.axis == 2.0][0] == pytest.approx(2**-0.5, rel=1e-15)
    assert rho[g.axis == 0.0][0] == pytest.approx(cell_average_power(0.5, g.h, 1), rel=1e-15)
    # the origin value is the cell average of |x|^{-1/2}: (1/h) ∫_{-h/2}^{h/2} |x|^{-1/2} dx = 2 (h/2)^{-1/2}
    assert rho[g.axis == 0.0][0] == pytest.approx(2 * (g.h / 2) ** -0.5, rel=1e-12)
    with pytest.raises(HypothesisError):
        eval_weight(WeightSpec(gamma0=0.5, gamma=0.5), g, s=0.4)


def test_two_regime_weight():
    g = Grid(2, 32, 4.0)
    spec = WeightSpec(gamma0=0.2, gamma=0.6, profile="two_regime")
    rho = eval_weight(spec, g, s=0.5)
    r = g.radius
    inner, outer = (r > 0) & (r <= 1), r > 1
    assert np.allclose(rho[inner], r[inner] ** -0.2) and np.allclose(rho[outer], r[outer] ** -0.6)
    assert weight_band_violation(spec, rho, g) == 0.0
    assert weight_band_violation(spec, 0.5 * rho, g) == pytest.approx(0.5)


def test_regularized_weight_is_monotone_in_eta():
    g = Grid(1, 256, 4.0)
    base = WeightSpec(gamma0=0.3, gamma=0.3, profile="regularized", eta=0.5)
    prev = None
    for eta in (0.5, 0.25, 0.1, 0.05):
        rho = eval_weight(base.with_eta(eta), g)
        assert np.all(np.isfinite(rho)) and rho.min() > 0
        if prev is not None:
            assert np.all(rho >= prev - 1e-15)
        prev = rho
    # far from the origin it approaches the unregularized weight
    far = np.abs(g.axis) > 2
    assert np.allclose(prev[far], np.abs(g.axis[far]) ** -0.3, rtol=1e-3)


@pytest.mark.parametrize("kwargs", [dict(profile="cubic"), dict(c=1.5), dict(C=0.5), dict(eta=-1.0),
                                    dict(gamma0=0.1, gamma=0.2), dict(gamma0=0.2, gamma=0.2, profile="regularized")])
def test_weight_spec_rejects(kwargs):
    with pytest.raises(ValueError):
        WeightSpec(**kwargs)


def test_measure_spec_validation():
    g = Grid(1, 16, 2.0)
    with pytest.raises(ValueError):
        MeasureSpec(atoms=((0.0, -1.0),))
    with pytest.raises(ValueError):
        MeasureSpec(density=np.ones(g.shape))
    with pytest.raises(ValueError):
        MeasureSpec.from_density(-np.ones(g.shape), g)
    with pytest.raises(ValueError):
        MeasureSpec(atoms=(((0.0, 0.0), 1.0),), grid=g)
    mu = MeasureSpec(atoms=((0.5, 2.0), (-0.5, 1.0)), density=np.full(g.shape, 0.25), grid=g)
    assert mu.total_mass == pytest.approx(3.0 + 0.25 * 4.0)


@pytest.mark.parametrize("d, n, L, eps", [(1, 512, 4.0, 0.1), (1, 256, 4.0, 0.0625), (2, 64, 4.0, 0.3)])
def test_mollifier_preserves_mass(d, n, L, eps):
    g = Grid(d, n, L)
    atoms = (((0.0,) * d, 1.0), ((0.7,) * d, 0.5))
    dens = mollify_measure(MeasureSpec(atoms=atoms, grid=g), Mollifier(eps), g)
    assert abs(g.integrate(dens) - 1.5) < 1e-10
    assert dens.min() >= 0


def test_mollifier_two_atoms_have_separate_supports():
    g = Grid(1, 512, 4.0)
    dens = mollify_measure(MeasureSpec(atoms=((-1.0, 1.0), (1.0, 2.0)), grid=g), Mollifier(0.2), g)
    left, right = g.axis < 0, g.axis > 0
    assert g.integrate(np.where(left, dens, 0)) == pytest.approx(1.0, abs=1e-10)
    assert g.integrate(np.where(right, dens, 0)) == pytest.approx(2.0, abs=1e-10)
    assert np.all(dens[np.abs(np.abs(g.axis) - 1) >= 0.2] == 0)


def test_mollifier_errors():
    g = Grid(1, 64, 2.0)
    with pytest.raises(ValueError):
        Mollifier(0.0)
    with pytest.raises(ValueError, match="twice"):
        mollify_measure(MeasureSpec.delta(grid=g), Mollifier(g.h), g)
    with pytest.raises(ValueError, match="leaves"):
        mollify_measure(MeasureSpec.delta(at=(1.9,), grid=g), Mollifier(0.2), g)


def test_mollified_density_mass():
    g = Grid(1, 128, 4.0)
    rng = np.random.default_rng(1)
    dens = rng.random(g.shape)
    out = mollify_measure(MeasureSpec.from_density(dens, g), Mollifier(0.3), g)
    assert g.integrate(out) == pytest.approx(g.integrate(dens), rel=1e-12)


def test_weighted_norm_examples():
    g = Grid(1, 8, 2.0)
    ones = np.ones(g.shape)
    assert weighted_norm(ones, 1, ones, g) == pytest.approx(4.0)
    assert weighted_norm(2 * ones, 2, ones, g) == pytest.approx(4.0)
    assert weighted_norm(-3 * ones, np.inf, ones, g) == 3.0
    with pytest.raises(ValueError):
        weighted_norm(ones, 0.5, ones, g)


@settings(max_examples=50, deadline=None)
@given(values=st.lists(st.floats(-1e3, 1e3), min_size=16, max_size=16), p=st.sampled_from([1.0, 1.5, 2.0, 3.0]))
def test_weighted_norm_is_monotone_in_weight(values, p):
    g = Grid(1, 16, 2.0)
    v = np.array(values)
    rho = eval_weight(WeightSpec(gamma0=0.2, gamma=0.2), g)
    assert weighted_norm(v, p, rho, g) <= weighted_norm(v, p, 2 * rho, g) + 1e-12
    assert weighted_norm(2 * v, p, rho, g) == pytest.approx(2 * weighted_norm(v, p, rho, g), rel=1e-12, abs=1e-300)


def test_weakstar_gap_shrinks_with_eps():
    g = Grid(1, 2048, 8.0)
    mu = MeasureSpec.delta(grid=g)
    bank = default_test_bank(1, g.L)
    gaps = [weakstar_gap(MeasureSpec.from_density(mollify_measure(mu, Mollifier(e), g), g), mu, bank)
            for e in (0.4, 0.2, 0.1, 0.05)]
    assert all(b < a for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < 1e-2
    assert weakstar_gap(mu, mu, bank) == 0.0
    with pytest.raises(ValueError):
        weakstar_gap(mu, mu, [])


@pytest.mark.parametrize("d", [1, 2])
def test_field_csv_round_trip(tmp_path, d):
    g = Grid(d, 16, 2.0)
    v = np.random.default_rng(0).random(g.shape)
    write_field_csv(tmp_path / "f.csv", v, g)
    assert np.array_equal(read_field_csv(tmp_path / "f.csv", g), v)
    with pytest.raises(ValueError):
        read_field_csv(tmp_path / "f.csv", Grid(d, 32, 2.0))


def test_measure_json_round_trip(tmp_path):
    g = Grid(1, 64, 4.0)
    dens = np.zeros(g.shape)
    dens[10:20] = 1.0
    write_field_csv(tmp_path / "dens.csv", dens, g)
    doc = {"atoms": [{"x": 0.5, "mass": 2.0}], "density_csv": "dens.csv"}
    (tmp_path / "mu.json").write_text(__import__("json").dumps(doc))
    mu = MeasureSpec.from_json(tmp_path / "mu.json", g)
    assert mu.atoms == (((0.5,), 2.0),)
    assert np.array_equal(mu.density, dens)
    assert mu.to_json()["total_mass"] == pytest.approx(2.0 + 10 * g.h)
    with pytest.raises(ValueError):
        MeasureSpec.from_json({}, g)
