import numpy as np
import pytest

from mfglions.model import lq_riccati, make_lq_model
from mfglions.paths import TimeGrid
from mfglions.solver import SolverConfig, solve_equilibrium

ALPHA, BETA, R = 1.0, 0.25, 0.1
P, Q = lq_riccati(ALPHA, BETA, R)


def small_config(N=1500, T=10.0, dt=0.05, seed=1, **kw):
    """Scale used by the unit tests: short horizon, coarse steps."""
    return SolverConfig(TimeGrid(T, dt), N=N, seed=seed, max_iters=80, **kw)


@pytest.fixture(scope="session")
def lq():
    return make_lq_model(ALPHA, BETA, R)


@pytest.fixture(scope="session")
def cfg():
    return small_config()


@pytest.fixture(scope="session")
def normal_xi(cfg):
    return np.random.default_rng(11).standard_normal(cfg.N)


@pytest.fixture(scope="session")
def eq_normal(lq, cfg, normal_xi):
    return solve_equilibrium(lq, normal_xi, cfg)


@pytest.fixture(scope="session")
def eq_one(lq, cfg):
    return solve_equilibrium(lq, np.ones(cfg.N), cfg)


@pytest.fixture(scope="session")
def two_atom_xi(cfg):
    return np.random.default_rng(12).choice([0.0, 1.0], cfg.N)


@pytest.fixture(scope="session")
def eq_two_atom(lq, cfg, two_atom_xi):
    return solve_equilibrium(lq, two_atom_xi, cfg)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for the acceptance summary, then assert it."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number, title, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}  {title}: {detail}"
        lines.append((number, line))
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
