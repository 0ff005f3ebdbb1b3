import numpy as np
import pytest

from degenmfg.errors import DimensionError, UnsupportedDimension
from degenmfg.fbsde import MeasureFlow, SolverParams, TimeGrid, solve_control, solve_mfg
from degenmfg.flows import (decompose_directional, jacobian_part, solve_directional,
                            solve_hessian_x, solve_jacobian_x, solve_lfd_kernel,
                            solve_population_part)
from degenmfg.lq import LQModel
from degenmfg.measure import ParticleMeasure
from degenmfg.model import LQSpec, MomentCoupledModel

from conftest import quartic_model, zero_model

ETA = np.array([[1.0], [-0.5], [2.0]])


def rel(a, b):
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-300))


def test_jacobian_of_zero_model():
    grid = TimeGrid(0, 1, 10)
    base = solve_control(zero_model(), 0.0, [0.3], MeasureFlow.constant(grid, [[0.0]]), grid,
                         SolverParams(N=50))
    jac = solve_jacobian_x(zero_model(), base)
    assert np.allclose(jac.Y[..., 0, 0], 1.0) and np.allclose(jac.p, 0.0)


def test_jacobian_of_linear_drift():
    a = 0.7
    m = MomentCoupledModel(f_terms=[[0.5, 0, 2, 0, 0]], g_terms=[[0.0, 0, 0, 0]], b1=a)
    grid = TimeGrid(0, 1, 200)
    base = solve_control(m, 0.0, [1.0], MeasureFlow.constant(grid, [[0.0]]), grid,
                         SolverParams(N=20))
    jac = solve_jacobian_x(m, base)
    # explicit Euler gives (1 + a dt)^k
    np.testing.assert_allclose(jac.Y[:, 0, 0, 0], (1 + a * grid.dt) ** np.arange(201), rtol=1e-12)
    np.testing.assert_allclose(jac.Y[-1, 0, 0, 0], np.exp(a), rtol=5e-3)


def test_jacobian_tanh(tanh_model):
    grid = TimeGrid(0, 1, 50)
    sol, _ = solve_mfg(tanh_model, 0.0, [[1.0]], grid, SolverParams(N=2000))
    jac = solve_jacobian_x(tanh_model, sol)
    assert jac.p[0].mean() == pytest.approx(np.tanh(1.0), rel=0.02)
    assert np.all(jac.Y[0] == 1.0)
    np.testing.assert_array_equal(jac.p[-1, :, 0, 0], 0.0)  # G = 0


def test_jacobian_matches_finite_differences():
    m = quartic_model()
    grid = TimeGrid(0, 1, 25)
    flow = MeasureFlow.constant(grid, [[0.0]])
    params = SolverParams(N=2000, degree=3)
    x, h = 1.0, 1e-3
    base = solve_control(m, 0.0, [x], flow, grid, params)
    up = solve_control(m, 0.0, [x + h], flow, grid, params)
    dn = solve_control(m, 0.0, [x - h], flow, grid, params)
    jac = solve_jacobian_x(m, base)
    fd = (up.Y - dn.Y) / (2 * h)
    assert np.all(np.abs(jac.Y[..., 0] - fd) <= 1e-2 * (1 + np.abs(jac.Y[..., 0])))
    fdp = (up.p[0].mean() - dn.p[0].mean()) / (2 * h)
    assert jac.p[0].mean() == pytest.approx(fdp, rel=1e-3)


def test_zero_direction_gives_zero_flow(coupled_model, coupled_mfg):
    sol, flow, _ = coupled_mfg
    d = solve_directional(coupled_model, sol, flow, np.zeros((3, 1)))
    assert np.all(d.Y == 0) and np.all(d.p == 0)
    jac, pop = decompose_directional(coupled_model, sol, flow, np.zeros((3, 1)))
    assert np.all(jac.Y == 0) and np.all(pop.Y == 0)


def test_linearity(coupled_model, coupled_mfg):
    sol, flow, _ = coupled_mfg
    e1, e2 = ETA, np.array([[0.3], [1.0], [-1.0]])
    a, b = 1.7, -0.4
    lhs = solve_directional(coupled_model, sol, flow, a * e1 + b * e2)
    d1 = solve_directional(coupled_model, sol, flow, e1)
    d2 = solve_directional(coupled_model, sol, flow, e2)
    for name in ("Y", "p", "q", "v"):
        L, A, B = getattr(lhs, name), a * getattr(d1, name), b * getattr(d2, name)
        scale = np.abs(A).max() + np.abs(B).max()
        assert np.abs(L - A - B).max() <= 1e-6 * scale, name


def test_decomposition_identity(coupled_model, coupled_mfg):
    sol, flow, _ = coupled_mfg
    direct = solve_directional(coupled_model, sol, flow, ETA)
    jac, pop = decompose_directional(coupled_model, sol, flow, ETA)
    for name in ("Y", "p", "q"):
        assert rel(getattr(jac, name) + getattr(pop, name), getattr(direct, name)) <= 1e-6
    # the frozen-population part is the x-Jacobian applied to eta
    full = solve_jacobian_x(coupled_model, sol)
    eta_t = np.tile(ETA, (sol.N // 3, 1))
    assert rel(jac.Y[..., 0], full.Y[..., 0] * eta_t[None]) <= 1e-6


def test_no_coupling_has_no_population_part(tanh_model):
    mu = ParticleMeasure([[0.5], [1.0], [1.5]])
    grid = TimeGrid(0, 1, 20)
    sol, flow = solve_mfg(tanh_model, 0.0, mu, grid, SolverParams(N=999))
    direct = solve_directional(tanh_model, sol, flow, ETA)
    jac, pop = decompose_directional(tanh_model, sol, flow, ETA)
    assert np.all(pop.Y == 0) and np.all(pop.p == 0)
    np.testing.assert_allclose(direct.Y, jac.Y, atol=1e-12)
    kern = solve_lfd_kernel(tanh_model, sol, None, flow, [[1.0]])
    assert np.all(kern.xi.Y == 0) and np.all(kern.xi.p == 0)


def test_directional_matches_finite_differences(coupled_model, coupled_mfg, small_params):
    sol, flow, mu = coupled_mfg
    eps = 1e-2
    shifted, _ = solve_mfg(coupled_model, 0.0, ParticleMeasure(mu.points + eps * ETA), sol.grid,
                           small_params)
    d = solve_directional(coupled_model, sol, flow, ETA)
    fd = (shifted.Y - sol.Y) / eps
    assert rel(d.Y[..., 0], fd) <= 1e-3
    fdp = (shifted.p - sol.p) / eps
    assert rel(d.p[..., 0], fdp) <= 1e-3


def test_kernel_averaging_identity(coupled_model, coupled_mfg):
    sol, flow, mu = coupled_mfg
    pop = solve_population_part(coupled_model, sol, ETA)
    kern = solve_lfd_kernel(coupled_model, sol, None, flow, mu.points)
    rec = sum(kern.xi.Y[..., 0, a] * ETA[a, 0] for a in range(3)) / 3
    assert rel(rec, pop.Y[..., 0, 0]) <= 0.05
    recp = sum(kern.xi.p[..., 0, a] * ETA[a, 0] for a in range(3)) / 3
    assert rel(recp, pop.p[..., 0, 0]) <= 0.05
    assert np.all(kern.xi.Y[0] == 0)


def test_kernel_dimension_checks(coupled_model, coupled_mfg):
    sol, flow, _ = coupled_mfg
    with pytest.raises(DimensionError):
        jacobian_part(coupled_model, sol, np.ones((7, 1)))


def test_hessian_vanishes_for_lq(tanh_model):
    grid = TimeGrid(0, 1, 20)
    sol, _ = solve_mfg(tanh_model, 0.0, [[1.0]], grid, SolverParams(N=500))
    hess = solve_hessian_x(tanh_model, sol)
    assert np.abs(hess.Y).max() <= 1e-12 and np.abs(hess.p).max() <= 1e-12


def test_hessian_zero_model():
    grid = TimeGrid(0, 1, 10)
    base = solve_control(zero_model(), 0.0, [0.0], MeasureFlow.constant(grid, [[0.0]]), grid,
                         SolverParams(N=50))
    hess = solve_hessian_x(zero_model(), base)
    assert np.all(hess.Y == 0) and np.all(hess.p == 0)


def test_hessian_quartic_matches_finite_differences():
    m = quartic_model(0.05)
    grid = TimeGrid(0, 1, 50)
    flow = MeasureFlow.constant(grid, [[0.0]])
    params = SolverParams(N=10_000, degree=3)
    x, h = 1.0, 1e-2
    p0 = [solve_control(m, 0.0, [y], flow, grid, params).p[0].mean() for y in (x - h, x, x + h)]
    fd = (p0[2] - 2 * p0[1] + p0[0]) / h ** 2
    base = solve_control(m, 0.0, [x], flow, grid, params)
    hess = solve_hessian_x(m, base)
    assert np.all(hess.Y[0] == 0)
    assert hess.p[0].mean() == pytest.approx(fd, rel=0.05)


def test_hessian_needs_scalar_model():
    lq = LQSpec(LQModel(n=2, d=1, b2=[[1.0], [0.0]], F1=np.eye(2), F2=[[1.0]]))
    grid = TimeGrid(0, 1, 5)
    base = solve_control(lq, 0.0, [0.0, 0.0], MeasureFlow.constant(grid, [[0.0, 0.0]]), grid,
                         SolverParams(N=30))
    with pytest.raises(DimensionError):
        solve_hessian_x(lq, base)
    with pytest.raises(UnsupportedDimension):
        solve_lfd_kernel(lq, base, None, MeasureFlow.constant(grid, [[0.0, 0.0]]),
                         [[0.0, 0.0]], second_order=True)


def test_multidimensional_jacobian_matches_finite_differences(rng):
    lq = LQModel(n=2, d=2, b1=[[0.0, 0.3], [-0.2, 0.1]], b2=np.eye(2), sigma0=0.2 * np.eye(2),
                 sigma1=0.1 * rng.normal(size=(2, 2, 2)), F1=[[1.0, 0.2], [0.2, 0.5]],
                 F2=np.eye(2), G=[[0.5, 0.0], [0.0, 0.2]])
    m = LQSpec(lq)
    grid = TimeGrid(0, 1, 20)
    flow = MeasureFlow.constant(grid, [[0.0, 0.0]])
    params = SolverParams(N=3000)
    x = np.array([0.5, -0.3])
    base = solve_control(m, 0.0, x, flow, grid, params)
    jac = solve_jacobian_x(m, base)
    h = 1e-3
    for c in range(2):
        e = np.zeros(2)
        e[c] = h
        up = solve_control(m, 0.0, x + e, flow, grid, params)
        dn = solve_control(m, 0.0, x - e, flow, grid, params)
        fd = (up.Y - dn.Y) / (2 * h)
        assert np.all(np.abs(jac.Y[..., c] - fd) <= 1e-2 * (1 + np.abs(jac.Y[..., c])))
