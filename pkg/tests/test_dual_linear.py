import numpy as np
import pytest
from scipy.linalg import expm

from fpme.diagnostics import default_psi_bank
from fpme.domain_model import WeightSpec, eval_weight
from fpme.dual_linear import (DualCoefficient, WeightedOperator, apply_A, build_coefficient, difference_quotient,
                              duality_identity_check, operator_report, potential_difference, semigroup_step,
                              solve_dual, weighted_inner)
from fpme.frac_ops import FracKernelConfig, Grid, apply_frac_power, hs_seminorm


def weighted_op(n=64, L=4.0, s=0.4, gamma=0.2):
    g = Grid(1, n, L)
    return WeightedOperator(g, eval_weight(WeightSpec(gamma0=gamma, gamma=gamma), g), s)


def column_matrix(op):
    """(-Δ)^s assembled column by column from its action on unit vectors."""
    n = op.size
    return np.stack([op.laplacian(np.eye(n)[j].reshape(op.grid.shape)).ravel() for j in range(n)], axis=1)


def test_apply_A_is_weighted_frac_laplacian():
    op = weighted_op()
    v = np.random.default_rng(0).standard_normal(op.grid.shape)
    expected = apply_frac_power(v, op.grid, FracKernelConfig(0.4, 1)) / op.rho
    assert np.allclose(apply_A(op, v), expected, atol=1e-13)


def test_form_identity():
    op = weighted_op()
    rng = np.random.default_rng(1)
    for _ in range(10):
        v = rng.standard_normal(op.grid.shape)
        assert weighted_inner(apply_A(op, v), v, op.rho, op.grid) == pytest.approx(
            hs_seminorm(v, op.grid, 0.4) ** 2, rel=1e-12)


def test_weight_must_be_positive():
    g = Grid(1, 16, 2.0)
    with pytest.raises(ValueError):
        WeightedOperator(g, np.zeros(g.shape), 0.4)


@pytest.mark.parametrize("t", [0.01, 0.1, 1.0])
def test_semigroup_matches_dense_expm(t):
    op = weighted_op()
    psi = np.exp(-op.grid.axis**2)
    exact = expm(-t * np.diag(1 / op.rho) @ column_matrix(op)) @ psi
    assert np.max(np.abs(semigroup_step(op, psi, t) - exact)) < 1e-8


def test_krylov_path_matches_eigen_path():
    op = weighted_op(n=512, L=8.0)
    psi = np.exp(-op.grid.axis**2) + 0.1
    assert np.max(np.abs(op._semigroup_krylov_free(psi, 0.05) - op.semigroup(psi, 0.05))) < 1e-10


def test_semigroup_composition_and_identity():
    op = weighted_op()
    psi = np.random.default_rng(2).random(op.grid.shape)
    assert np.array_equal(op.semigroup(psi, 0.0), psi)
    twice = op.semigroup(op.semigroup(psi, 0.03), 0.05)
    assert np.max(np.abs(twice - op.semigroup(psi, 0.08))) < 1e-12
    with pytest.raises(ValueError):
        op.semigroup(psi, -1.0)


@pytest.mark.parametrize("n", [64, 256])
def test_operator_report_passes(n):
    rep = operator_report(weighted_op(n=n, L=8.0), samples=10)
    assert rep.passed, rep.summary_line()


def test_difference_quotient():
    u1 = np.array([1.0, 2.0, 0.5, 3.0])
    u2 = np.array([0.0, 2.0, 1.5, 3.0 + 1e-14])
    a = difference_quotient(u1, u2, 2.0)
    assert np.allclose(a, [1.0, 0.0, 2.0, 0.0])
    assert np.allclose(difference_quotient(u1, u2, 3.0)[[0, 2]], [1.0, (0.125 - 3.375) / -1.0])


def test_build_coefficient(small_pair):
    u1, u2 = small_pair
    coef = build_coefficient(u1, u2, 0.0, 8, T=0.1)
    assert coef.n == 8 and coef.boundaries[0] == 0.1 and coef.boundaries[-1] == pytest.approx(0.0)
    # m = 2: the quotient is u1 + u2 wherever they differ
    t = 0.1 - 3 * 0.1 / 8
    a1, a2 = u1.field_at(t), u2.field_at(t)
    far = np.abs(a1 - a2) > 1e-13
    assert np.allclose(coef.fields[2][far], (a1 + a2)[far], rtol=1e-12)
    swapped = build_coefficient(u2, u1, 0.0, 8, T=0.1)
    assert np.allclose(swapped.fields, coef.fields)
    bound = 2 * max(u1.sup_norms().max(), u2.sup_norms().max())
    assert coef.fields.min() >= 0 and coef.fields.max() <= bound
    with pytest.raises(ValueError):
        build_coefficient(u1, u2, 0.05, 8, T=0.1)


def test_coefficient_validation():
    g = Grid(1, 16, 2.0)
    with pytest.raises(ValueError):
        DualCoefficient(g, 1.0, -np.ones((2, 16)), 1e-3)
    with pytest.raises(ValueError):
        DualCoefficient(g, 1.0, np.ones((2, 8)), 1e-3)
    with pytest.raises(ValueError):
        DualCoefficient(g, 1.0, np.ones((2, 16)), 0.0)
    coef = DualCoefficient(g, 1.0, np.ones((4, 16)), 1e-3)
    assert [coef.interval_of(t) for t in (1.0, 0.8, 0.74, 0.5, 0.0)] == [0, 0, 1, 1, 3]


def test_zero_coefficient_reduces_to_scaled_semigroup():
    op = weighted_op()
    eps = 0.01
    coef = DualCoefficient(op.grid, 1.0, np.zeros((5, *op.grid.shape)), eps)
    psi = np.exp(-op.grid.axis**2)
    sol = solve_dual(coef, psi, op)
    for k, tau in enumerate(1.0 - coef.boundaries):
        assert np.max(np.abs(sol.values[k] - op.semigroup(psi, eps * tau))) < 1e-12


def test_constant_coefficient_matches_dense_expm():
    op = weighted_op()
    a, eps = 0.7, 1e-3
    coef = DualCoefficient(op.grid, 0.5, np.full((4, *op.grid.shape), a), eps)
    psi = np.exp(-op.grid.axis**2)
    sol = solve_dual(coef, psi, op)
    gen = (a + eps) * np.diag(1 / op.rho) @ column_matrix(op)
    for tau in (0.05, 0.125, 0.3, 0.5):
        assert np.max(np.abs(sol.at(0.5 - tau) - expm(-tau * gen) @ psi)) < 1e-8


def test_dual_is_positive_and_conserves_mass(small_pair):
    u1, u2 = small_pair
    coef = build_coefficient(u1, u2, 0.0, 16, T=0.1)
    op = WeightedOperator(u1.grid, u1.rho, u1.cfg.s)
    for psi in default_psi_bank(u1.grid)[:4]:
        sol = solve_dual(coef, psi, op)
        masses = sol.masses()
        assert np.max(np.abs(masses - masses[0])) <= 1e-9 * masses[0]
        assert min(v.min() for v in sol.values) >= -1e-12
    with pytest.raises(ValueError):
        solve_dual(coef, -np.ones(u1.grid.shape), op)


def test_identity_vanishes_for_equal_solutions(small_pair):
    u1, _ = small_pair
    g = potential_difference(u1, u1, 0.0, T=0.1)
    assert np.max(np.abs(g.values)) == 0
    coef = build_coefficient(u1, u1, 0.0, 8, T=0.1)
    sol = solve_dual(coef, default_psi_bank(u1.grid)[0], WeightedOperator(u1.grid, u1.rho, u1.cfg.s))
    rep = duality_identity_check(g, sol, coef, 0.0)
    assert rep.results["lhs"] == 0 and abs(rep.results["rhs"]) < 1e-14


@pytest.mark.parametrize("h", [0.0, 0.01])
def test_duality_identity_holds_to_quadrature_accuracy(small_pair, h):
    u1, u2 = small_pair
    coef = build_coefficient(u1, u2, h, 16, T=0.1)
    g = potential_difference(u1, u2, h, T=0.1)
    sol = solve_dual(coef, default_psi_bank(u1.grid)[1], WeightedOperator(u1.grid, u1.rho, u1.cfg.s))
    rep = duality_identity_check(g, sol, coef, 0.0, tol=1e-9)
    assert rep.passed, rep.summary_line()
    assert rep.flags["eps_term_bounded"]


def test_potential_difference_needs_uniform_steps(delta_run):
    with pytest.raises(ValueError, match="uniform"):
        potential_difference(delta_run, delta_run, 0.0)
