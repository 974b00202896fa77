import pytest

from fpme.domain_model import MeasureSpec, WeightSpec
from fpme.frac_ops import Grid
from fpme.pme_solver import SolverConfig, evolve

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def delta_grid():
    return Grid(1, 4096, 20.0)


@pytest.fixture(scope="session")
def delta_config():
    return SolverConfig(m=2.0, s=0.4, T=0.1, dt=2e-3, dt0=1e-6, ramp=1.08)


@pytest.fixture(scope="session")
def delta_run(delta_grid, delta_config):
    """Unit delta, d=1, s=0.4, m=2, no weight, mollified at about two grid spacings."""
    return evolve(MeasureSpec.delta(1.0, grid=delta_grid), 0.02, delta_config, WeightSpec(), delta_grid)


@pytest.fixture(scope="session")
def small_grid():
    return Grid(1, 256, 8.0)


@pytest.fixture(scope="session")
def small_pair(small_grid):
    """Two mollifications of one delta on a coarse grid, weighted, uniform dt."""
    weight = WeightSpec(gamma0=0.1, gamma=0.1)
    cfg = SolverConfig(m=2.0, s=0.45, T=0.12, dt=1e-3)
    mu = MeasureSpec.delta(1.0, grid=small_grid)
    return evolve(mu, 0.125, cfg, weight, small_grid), evolve(mu, 0.25, cfg, weight, small_grid)
