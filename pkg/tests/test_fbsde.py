import csv

import numpy as np
import pytest

from degenmfg.errors import DimensionError, DivergenceError, PicardDivergence
from degenmfg.fbsde import (MeasureFlow, SolverParams, TimeGrid, bsde_residual, flow_distance,
                            solve_control, solve_mfg, stability_probe)
from degenmfg.hamiltonian import v_gradient
from degenmfg.lq import lq_equilibrium_flow
from degenmfg.measure import ParticleMeasure
from degenmfg.model import LQSpec, MomentCoupledModel

from conftest import tanh_lq, zero_model

GRID = TimeGrid(0.0, 1.0, 50)
MU1 = ParticleMeasure([[1.0]])


@pytest.fixture(scope="module")
def tanh_mfg(tanh_model):
    return solve_mfg(tanh_model, 0.0, MU1, GRID, SolverParams(N=10_000))


def max_optimality(model, sol):
    return max(float(np.abs(v_gradient(model, s, sol.Y[k], sol.F[k], sol.v[k], sol.p[k],
                                       sol.q[k])).max())
               for k, s in enumerate(sol.grid.nodes))


def test_params_validation():
    with pytest.raises(ValueError):
        SolverParams(theta=0.0)
    with pytest.raises(ValueError):
        SolverParams(N=0)
    assert SolverParams().replace(N=5).N == 5


def test_grid():
    g = TimeGrid(0.5, 1.0, 10)
    assert g.dt == pytest.approx(0.05)
    assert g.index_of(0.75) == 5
    with pytest.raises(ValueError):
        g.index_of(0.77)
    with pytest.raises(ValueError):
        TimeGrid(1.0, 1.0, 3)


def test_zero_model_stays_at_rest():
    sol, flow = solve_mfg(zero_model(), 0.0, ParticleMeasure([[0.0]]), TimeGrid(0, 1, 10),
                          SolverParams(N=50))
    for arr in (sol.Y, sol.p, sol.q, sol.v):
        assert np.all(arr == 0)
    assert all(np.all(m.points == 0) for m in flow.measures)
    assert bsde_residual(zero_model(), sol, flow) == 0.0


def test_tanh_equilibrium(tanh_model, tanh_mfg):
    sol, flow = tanh_mfg
    assert sol.p[0].mean() == pytest.approx(np.tanh(1.0), rel=0.02)
    # invariants: terminal condition, optimality, fixed point
    assert np.array_equal(sol.p[-1], tanh_model.gx(sol.Y[-1], sol.F[-1]))
    assert max_optimality(tanh_model, sol) <= 1e-8
    assert sol.flow_distance <= SolverParams().flow_tol
    assert bsde_residual(tanh_model, sol, flow) <= 5e-3 * 2
    assert np.all(sol.Y[0] == 1.0)


def test_control_against_frozen_flow(tanh_model, tanh_mfg):
    _, flow = tanh_mfg
    sol = solve_control(tanh_model, 0.0, [2.0], flow, GRID, SolverParams(N=10_000))
    assert sol.p[0].mean() == pytest.approx(2 * np.tanh(1.0), rel=0.02)
    assert np.all(sol.Y[0] == 2.0)
    assert max_optimality(tanh_model, sol) <= 1e-8
    assert bsde_residual(tanh_model, sol, flow) <= 5e-3 * 3


def test_control_at_an_atom_reproduces_the_equilibrium(tanh_model, tanh_mfg):
    eq, flow = tanh_mfg
    sol = solve_control(tanh_model, 0.0, [1.0], flow, GRID, SolverParams(N=10_000))
    np.testing.assert_allclose(sol.Y.mean(axis=1), eq.Y.mean(axis=1), rtol=0.02, atol=1e-3)
    np.testing.assert_allclose(sol.p.mean(axis=1), eq.p.mean(axis=1), rtol=0.02, atol=1e-3)


def test_deterministic_two_point_problem():
    # b = v, f = v^2/2, g = x^2/2, no noise: p(0) = x / (1 + T)
    m = MomentCoupledModel(f_terms=[[0.5, 0, 2, 0, 0]], g_terms=[[0.5, 2, 0, 0]])
    flow = MeasureFlow.constant(GRID, MU1)
    sol = solve_control(m, 0.0, [1.0], flow, GRID, SolverParams(N=20))
    assert sol.p[0].mean() == pytest.approx(0.5, abs=1e-3)


def test_mean_coupled_flow_matches_oracle():
    lq = tanh_lq(F1m=[[0.5]])
    sol, _ = solve_mfg(LQSpec(lq), 0.0, MU1, GRID, SolverParams(N=10_000))
    oracle = lq_equilibrium_flow(lq, 0.0, MU1, GRID)
    np.testing.assert_allclose(sol.Y.mean(axis=1)[:, 0], oracle.mean[:, 0], rtol=0.02)


def test_bsde_residual_detects_a_jump(tanh_model, tanh_mfg):
    sol, flow = tanh_mfg
    bad = type(sol)(**{**sol.__dict__, "p": sol.p.copy()})
    bad.p[20] += 1.0
    assert bsde_residual(tanh_model, bad, flow) >= 0.5


def test_common_random_numbers_are_deterministic(tanh_model):
    a, _ = solve_mfg(tanh_model, 0.0, MU1, TimeGrid(0, 1, 10), SolverParams(N=500, seed=4))
    b, _ = solve_mfg(tanh_model, 0.0, MU1, TimeGrid(0, 1, 10), SolverParams(N=500, seed=4))
    c, _ = solve_mfg(tanh_model, 0.0, MU1, TimeGrid(0, 1, 10), SolverParams(N=500, seed=5))
    assert np.array_equal(a.Y, b.Y) and np.array_equal(a.p, b.p)
    assert not np.array_equal(a.Y, c.Y)


def test_atoms_are_tiled_to_fill_n(coupled_mfg):
    sol, flow, mu = coupled_mfg
    assert sol.N % mu.size == 0 and sol.N >= 2000
    for a in range(mu.size):
        assert np.all(sol.Y[0, a::mu.size] == mu.points[a])


def test_stability_probe(coupled_model):
    mu = ParticleMeasure([[0.5], [1.0], [1.5]])
    grid = TimeGrid(0.0, 1.0, 20)
    params = SolverParams(N=3000)
    assert stability_probe(coupled_model, 0.0, mu, mu, grid, params) == 0.0
    ratios = [stability_probe(coupled_model, 0.0, mu, ParticleMeasure(mu.points + [[e], [0], [-e]]),
                              grid, params) for e in (0.1, 0.05, 0.025)]
    assert max(ratios) <= 1.2 * min(ratios)


def test_stability_probe_uncoupled_is_linear(tanh_model):
    grid = TimeGrid(0.0, 1.0, 20)
    mu = ParticleMeasure([[1.0]])
    ratio = stability_probe(tanh_model, 0.0, mu, ParticleMeasure([[1.1]]), grid,
                            SolverParams(N=1000))
    # closed loop: Y shifts by cosh(1-s)/cosh(1), p by tanh(1-s) times that
    s = grid.nodes
    shift = np.cosh(1 - s) / np.cosh(1)
    assert ratio == pytest.approx(np.max(shift ** 2 * (1 + np.tanh(1 - s) ** 2)), rel=0.02)


def test_picard_divergence_is_reported(tanh_model, tanh_mfg):
    _, flow = tanh_mfg
    with pytest.raises(PicardDivergence) as exc:
        solve_control(tanh_model, 0.0, [1.0], flow, GRID,
                      SolverParams(N=200, max_sweeps=2, tol=1e-15))
    assert len(exc.value.trace) == 2


def test_flow_divergence_after_continuation(coupled_model):
    with pytest.raises(DivergenceError) as exc:
        solve_mfg(coupled_model, 0.0, MU1, TimeGrid(0, 1, 10),
                  SolverParams(N=200, max_sweeps=2, flow_tol=1e-15, tol=1e-15))
    assert "coupling" in str(exc.value)


def test_dimension_checks(tanh_model, tanh_mfg):
    _, flow = tanh_mfg
    with pytest.raises(DimensionError):
        solve_control(tanh_model, 0.0, [1.0, 2.0], flow, GRID)
    with pytest.raises(DimensionError):
        solve_mfg(tanh_model, 0.0, ParticleMeasure([[1.0, 0.0]]), GRID)
    with pytest.raises(DimensionError):
        solve_mfg(tanh_model, 0.0, MU1, TimeGrid(0.0, 2.0, 10))


def test_flow_distance_in_1d_is_w2():
    a = np.array([[[0.0], [1.0]], [[0.0], [2.0]]])
    b = np.array([[[1.0], [0.0]], [[0.0], [0.0]]])
    assert flow_distance(a, b) == pytest.approx(np.sqrt(2.0))


def test_csv_export(tmp_path, tanh_model):
    sol, _ = solve_mfg(tanh_model, 0.0, MU1, TimeGrid(0, 1, 4), SolverParams(N=10))
    sol.to_csv(tmp_path / "s.csv", flow_kind="base")
    rows = list(csv.reader((tmp_path / "s.csv").open()))
    assert rows[0] == ["flow_kind", "node", "particle", "Y0", "p0", "q00", "v0"]
    assert len(rows) == 1 + 5 * 10
    k, i = 3, 7
    row = rows[1 + k * 10 + i]
    assert row[:3] == ["base", "3", "7"]
    assert float(row[4]) == sol.p[k, i, 0]


@pytest.mark.slow
def test_error_shrinks_with_particles(tanh_model):
    ref = lq_equilibrium_flow(tanh_lq(), 0.0, MU1, GRID).cov[-1, 0, 0]
    errs = []
    for N in (1000, 10_000, 40_000):
        e = [abs(solve_mfg(tanh_model, 0.0, MU1, GRID, SolverParams(N=N, seed=s))[0]
                 .Y[-1, :, 0].var() - ref) for s in range(4)]
        errs.append(np.mean(e))
    assert errs[0] >= errs[1] >= errs[2]
