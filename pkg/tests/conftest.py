import numpy as np
import pytest

from degenmfg.fbsde import SolverParams, TimeGrid, solve_mfg
from degenmfg.lq import LQModel
from degenmfg.measure import ParticleMeasure
from degenmfg.model import LQSpec, MomentCoupledModel


def tanh_lq(**coupling) -> LQModel:
    """b = v, sigma = 0.3, f = (x^2 + v^2)/2, g = 0 on [0, 1]: V2(t) = tanh(1 - t)."""
    return LQModel(n=1, d=1, T=1.0, b2=[[1.0]], sigma0=[[0.3]], F1=[[1.0]], F2=[[1.0]],
                   **coupling)


def zero_model(T=1.0) -> MomentCoupledModel:
    """b = v, sigma = 0, f = v^2/2, g = 0."""
    return MomentCoupledModel(f_terms=[[0.5, 0, 2, 0, 0]], g_terms=[[0.0, 0, 0, 0]], T=T)


def quartic_model(eps=0.05) -> MomentCoupledModel:
    return MomentCoupledModel(f_terms=[[0.5, 2, 0, 0, 0], [0.5, 0, 2, 0, 0]],
                              g_terms=[[0.5, 2, 0, 0], [eps, 4, 0, 0]],
                              sig0_terms=[[0.3, 0, 0]], b2=1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tanh_model():
    return LQSpec(tanh_lq(), name="tanh")


@pytest.fixture(scope="session")
def coupled_model():
    return LQSpec(tanh_lq(F1m=[[0.5]], B0m=[[0.2]]), name="coupled")


@pytest.fixture(scope="session")
def small_params():
    return SolverParams(N=2000, seed=3)


@pytest.fixture(scope="session")
def coupled_mfg(coupled_model, small_params):
    mu = ParticleMeasure([[0.5], [1.0], [1.5]])
    grid = TimeGrid(0.0, 1.0, 20)
    sol, flow = solve_mfg(coupled_model, 0.0, mu, grid, small_params)
    return sol, flow, mu


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion, then assert it."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, {})

    def record(number, passed, detail):
        lines[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        assert passed, lines[number]

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
