"""Value functional, its derivatives in x and in the population, and consistency checks.

``V(t, x, mu)`` is estimated along the optimal path of a player started at x
against the equilibrium flow started from mu. The population derivative
``D_y dV/dnu`` is assembled from the measure-derivative kernels, and the time
derivative from the master-equation right-hand side. The checks compare these
pieces with time differences of the value pipeline itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._grid import TimeGrid
from .errors import MissingA4, UnsupportedDimension
from .fbsde import FbsdeSolution, MeasureFlow, SolverParams, solve_control, solve_mfg
from .flows import solve_hessian_x, solve_jacobian_x, solve_lfd_kernel
from .hamiltonian import Costate, control_map, diffusion, drift, hamiltonian
from .measure import ParticleMeasure, as_measure

DEFAULT_K = 50
MAX_ATOMS = 64


class Equilibrium:
    """Cached solves for one ``(t, mu)``: the equilibrium flow and players started at x.

    For models whose data ignore the population the flow is irrelevant and is
    replaced by the constant flow of mu, so no fixed point is solved.
    """

    def __init__(self, model, t: float, mu, grid: TimeGrid | None = None,
                 params: SolverParams | None = None, K: int = DEFAULT_K):
        self.model = model
        self.t = float(t)
        self.mu = as_measure(mu)
        self.params = params or SolverParams()
        self.grid = grid if grid is not None else TimeGrid(self.t, model.T, K)
        if model.has_coupling:
            self.solution, self.flow = solve_mfg(model, self.t, self.mu, self.grid, self.params)
        else:
            self.solution = None
            self.flow = MeasureFlow.constant(self.grid, self.mu)
        self._players: dict = {}
        self._jacobians: dict = {}

    def player(self, x) -> FbsdeSolution:
        key = tuple(np.atleast_1d(np.asarray(x, dtype=float)).tolist())
        if key not in self._players:
            self._players[key] = solve_control(self.model, self.t, np.array(key), self.flow,
                                               self.grid, self.params)
        return self._players[key]

    def jacobian(self, x):
        key = tuple(np.atleast_1d(np.asarray(x, dtype=float)).tolist())
        if key not in self._jacobians:
            self._jacobians[key] = solve_jacobian_x(self.model, self.player(key))
        return self._jacobians[key]

    def atom_costate(self, y) -> np.ndarray:
        """D_xV(t, y, mu) at an atom y of mu, read off the equilibrium particles."""
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if self.solution is not None:
            hit = np.all(self.solution.Y[0] == y, axis=1)
            if hit.any():
                return self.solution.p[0][hit].mean(axis=0)
        return self.player(y).p[0].mean(axis=0)


def _is_terminal(model, t) -> bool:
    return t >= model.T - 1e-12


def _trapezoid_weights(K: int) -> np.ndarray:
    w = np.ones(K + 1)
    w[0] = w[-1] = 0.5
    return w


def running_cost(model, sol: FbsdeSolution, k_end: int | None = None) -> np.ndarray:
    """Per-path trapezoidal integral of f from node 0 to ``k_end``."""
    g = sol.grid
    k_end = g.K if k_end is None else k_end
    if k_end == 0:
        return np.zeros(sol.N)
    w = _trapezoid_weights(k_end)
    s = g.nodes
    acc = np.zeros(sol.N)
    for k in range(k_end + 1):
        acc += w[k] * model.f(s[k], sol.Y[k], sol.F[k], sol.v[k])
    return acc * g.dt


def martingale_correction(model, sol: FbsdeSolution, k_end: int | None = None) -> np.ndarray:
    """sum_k p_k . sigma_k dB_k, a zero-mean control variate for the cost."""
    g = sol.grid
    k_end = g.K if k_end is None else k_end
    s = g.nodes
    acc = np.zeros(sol.N)
    for k in range(k_end):
        sig = diffusion(model, s[k], sol.Y[k], sol.F[k], sol.v[k])
        acc += np.einsum("ia,iaj,ij->i", sol.p[k], sig, sol.dB[k])
    return acc


def cost_estimate(model, sol: FbsdeSolution) -> float:
    K = sol.grid.K
    total = (running_cost(model, sol) + model.g(sol.Y[K], sol.F[K])
             - martingale_correction(model, sol))
    return float(total.mean())


def _equilibrium(model, t, mu, grid, params, equilibrium):
    if equilibrium is not None:
        return equilibrium
    return Equilibrium(model, t, mu, grid, params)


def value(model, t: float, x, mu, grid: TimeGrid | None = None,
          params: SolverParams | None = None, equilibrium: Equilibrium | None = None) -> float:
    """Monte Carlo estimate of the optimal cost of a player at (t, x) facing mu."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if _is_terminal(model, t):
        return float(model.g(x[None], model.features(mu))[0])
    eq = _equilibrium(model, t, mu, grid, params, equilibrium)
    return cost_estimate(model, eq.player(x))


def grad_value(model, t: float, x, mu, grid: TimeGrid | None = None,
               params: SolverParams | None = None,
               equilibrium: Equilibrium | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(D_xV, D_x^2 V) read from the costate and its Jacobian at the start time."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if _is_terminal(model, t):
        F = model.features(mu)
        return model.gx(x[None], F)[0], np.asarray(model.gxx(x[None], F)[0])
    eq = _equilibrium(model, t, mu, grid, params, equilibrium)
    p0 = eq.player(x).p[0].mean(axis=0)
    H = eq.jacobian(x).p[0].mean(axis=0)
    return p0, 0.5 * (H + H.T)


def _kernel_functional(model, base: FbsdeSolution, kflow) -> np.ndarray:
    """Derivative of the player's cost along each column of a kernel flow."""
    g = base.grid
    s, K = g.nodes, g.K
    w = _trapezoid_weights(K) * g.dt
    out = np.zeros(kflow.columns)
    for k in range(K + 1):
        Y, F, v = base.Y[k], base.F[k], base.v[k]
        term = (np.einsum("ia,iac->c", model.fx(s[k], Y, F, v), kflow.Y[k])
                + np.einsum("ie,iec->c", model.fv(s[k], Y, F, v), kflow.v[k])
                + np.einsum("ir,rc->c", model.fF(s[k], Y, F, v), kflow.dF[k])) / base.N
        out += w[k] * term
    out += (np.einsum("ia,iac->c", model.gx(base.Y[K], base.F[K]), kflow.Y[K])
            + np.einsum("ir,rc->c", model.gF(base.Y[K], base.F[K]), kflow.dF[K])) / base.N
    return out


def lfd_value(model, t: float, x, mu, probes, grid: TimeGrid | None = None,
              params: SolverParams | None = None, second_order: bool = False,
              equilibrium: Equilibrium | None = None) -> dict:
    """D_y dV/dnu(t, x, mu)(y) at the probes, and D_y^2 of it in 1D.

    Returns ``{"y": (P, n), "D_y": (P, n)}`` plus ``"D_yy": (P,)`` when
    ``second_order``.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    probes = np.asarray(probes, dtype=float).reshape(-1, model.n)
    if second_order and (model.n != 1 or model.d != 1):
        raise UnsupportedDimension("D_y^2 of the measure derivative needs n = d = 1")
    out = {"y": probes, "D_y": np.zeros((probes.shape[0], model.n))}
    if second_order:
        out["D_yy"] = np.zeros(probes.shape[0])
    if not model.has_coupling or _is_terminal(model, t):
        if _is_terminal(model, t) and model.has_coupling:
            F = model.features(mu)
            gF = model.gF(x[None], F)[0]
            grads = model.phi.grad(probes)
            out["D_y"] = np.einsum("r,prn->pn", gF, grads)
            if second_order:
                out["D_yy"] = np.einsum("r,pr->p", gF, model.phi.hess(probes)[:, :, 0, 0])
        return out
    eq = _equilibrium(model, t, mu, grid, params, equilibrium)
    base_x = eq.player(x)
    ker = solve_lfd_kernel(model, eq.solution, base_x, eq.flow, probes, eq.params,
                           second_order=second_order)
    out["D_y"] = _kernel_functional(model, base_x, ker.mu).reshape(probes.shape[0], model.n)
    if second_order:
        out["D_yy"] = _kernel_functional(model, base_x, ker.mu_zz)
    return out


def _weighted_atoms(mu: ParticleMeasure, seed: int, cap: int = MAX_ATOMS):
    atoms, weights = mu.unique_atoms()
    if atoms.shape[0] > cap:
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(atoms.shape[0], cap, replace=False))
        atoms, weights = atoms[pick], weights[pick] / weights[pick].sum()
    return atoms, weights


def _hamiltonian_terms(model, t, x, mu, DxV, Dx2V):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    F = model.features(mu)
    sig = diffusion(model, t, x[None], F, np.zeros((1, model.d)))[0]
    q = 0.5 * Dx2V @ sig
    return hamiltonian(model, t, x, mu, Costate(DxV, q))


def _population_integral(model, t, x, mu, eq: Equilibrium, grid, params):
    """Integral over mu of b . D_y dV/dnu + Tr(sigma^T D_y^2 dV/dnu sigma) / 2."""
    if not model.has_coupling:
        return 0.0, {}
    if model.n != 1 or model.d != 1:
        raise UnsupportedDimension("the population term of the time derivative needs n = d = 1")
    atoms, weights = _weighted_atoms(eq.mu, eq.params.seed)
    lfd = lfd_value(model, t, x, mu, atoms, second_order=True, equilibrium=eq)
    F = model.features(mu)
    total = 0.0
    for a, (y, w) in enumerate(zip(atoms, weights)):
        p = eq.atom_costate(y)[None]
        v = control_map(model, t, y[None], F, p, np.zeros((1, 1, 1)))
        b = drift(model, t, y[None], F, v)[0]
        sig = diffusion(model, t, y[None], F, v)[0]
        total += w * (b @ lfd["D_y"][a] + 0.5 * float(sig[0, 0] ** 2 * lfd["D_yy"][a]))
    return float(total), lfd


def dt_value(model, t: float, x, mu, grid: TimeGrid | None = None,
             params: SolverParams | None = None, equilibrium: Equilibrium | None = None) -> float:
    """Time derivative of V from the master-equation right-hand side."""
    if not model.has_A4():
        raise MissingA4("the time derivative formula needs a control-free diffusion")
    eq = _equilibrium(model, t, mu, grid, params, equilibrium)
    DxV, Dx2V = grad_value(model, t, x, mu, equilibrium=eq)
    Hval = _hamiltonian_terms(model, t, x, mu, DxV, Dx2V)
    integral, _ = _population_integral(model, t, x, mu, eq, grid, params)
    return float(-Hval - integral)


def dt_value_fd(model, t: float, x, mu, h: float = 0.05, params: SolverParams | None = None,
                K: int = DEFAULT_K) -> float:
    """Second-order finite difference of the value pipeline in t (mu held fixed)."""
    T = model.T
    V = lambda s: value(model, s, x, mu, TimeGrid(s, T, K) if s < T - 1e-12 else None, params)
    if t - h >= 0.0 and t + h <= T:
        return (V(t + h) - V(t - h)) / (2 * h)
    if t + 2 * h <= T:
        return (-3 * V(t) + 4 * V(t + h) - V(t + 2 * h)) / (2 * h)
    return (3 * V(t) - 4 * V(t - h) + V(t - 2 * h)) / (2 * h)


def master_residual(model, t: float, x, mu, params: SolverParams | None = None,
                    K: int = DEFAULT_K, h: float = 0.05) -> float:
    """Left side of the master equation with dV/dt from time differences of V.

    The Hamiltonian and population terms come from the derivative pipeline at
    (t, x, mu); the time derivative is estimated independently, so the
    residual measures the joint consistency of both.
    """
    if not model.has_A4():
        raise MissingA4("the master equation needs a control-free diffusion")
    if _is_terminal(model, t):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return float(value(model, t, x, mu) - model.g(x[None], model.features(mu))[0])
    params = params or SolverParams()
    eq = Equilibrium(model, t, mu, TimeGrid(t, model.T, K), params)
    rhs = dt_value(model, t, x, mu, equilibrium=eq)
    return float(dt_value_fd(model, t, x, mu, h, params, K) - rhs)


def _fit_and_average(model, nodes, values, cloud, degree):
    from .fbsde import NodeBasis, monomial_exponents

    exps = monomial_exponents(model.n, degree)
    basis = NodeBasis(nodes, exps)
    _, coef = basis.project(values)
    return float(np.mean(basis.design(cloud) @ coef))


def dpp_check(model, t: float, x, mu, eps: float, grid: TimeGrid | None = None,
              params: SolverParams | None = None, fit_nodes: int = 5,
              equilibrium: Equilibrium | None = None) -> float:
    """Gap between V(t) and the cost to t + eps plus the value reached at t + eps.

    The continuation value ``V(t + eps, ., m(t + eps))`` is computed at a few
    nodes spanning the evolved cloud, with a fresh equilibrium started from the
    evolved population, and interpolated by a polynomial.
    """
    if eps == 0:
        return 0.0
    x = np.atleast_1d(np.asarray(x, dtype=float))
    eq = _equilibrium(model, t, mu, grid, params, equilibrium)
    g = eq.grid
    k_eps = g.index_of(t + eps)
    sol = eq.player(x)
    V_t = cost_estimate(model, sol)
    run = running_cost(model, sol, k_eps) - martingale_correction(model, sol, k_eps)
    Yk = sol.Y[k_eps]
    if k_eps == g.K:
        cont = model.g(Yk, sol.F[g.K])
        return float(abs(V_t - np.mean(run + cont)))
    m_eps = eq.flow.measures[k_eps]
    inner_params = eq.params.replace(seed=eq.params.seed + 1)
    inner = Equilibrium(model, t + eps, m_eps, TimeGrid(t + eps, model.T, g.K - k_eps),
                        inner_params)
    if model.n == 1:
        qs = np.linspace(0.02, 0.98, fit_nodes)
        nodes = np.unique(np.quantile(Yk[:, 0], qs))[:, None]
    else:
        rng = np.random.default_rng(eq.params.seed)
        nodes = Yk[rng.choice(Yk.shape[0], min(Yk.shape[0], 6 * fit_nodes), replace=False)]
    vals = np.array([cost_estimate(model, inner.player(z)) for z in nodes])
    degree = min(2, nodes.shape[0] - 1)
    cont = _fit_and_average(model, nodes, vals, Yk, degree)
    return float(abs(V_t - (np.mean(run) + cont)))


def decoupling_check(model, t: float, mu, s: float, x, grid: TimeGrid | None = None,
                     params: SolverParams | None = None, h_nodes: int = 2,
                     equilibrium: Equilibrium | None = None) -> float:
    """HJB residual of u(s, x) = V(s, x, m(s)) along the equilibrium flow from (t, mu).

    ``s`` must be a node of the equilibrium grid; the s-derivative is a
    central difference over ``h_nodes`` grid steps (one-sided at the ends).
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    eq = _equilibrium(model, t, mu, grid, params, equilibrium)
    g = eq.grid
    k = g.index_of(s)
    if k == g.K:
        m_T = eq.flow.measures[k]
        return float(value(model, s, x, m_T) - model.g(x[None], model.features(m_T))[0])
    params = eq.params

    def u(j):
        sj = g.nodes[j]
        if j == g.K:
            return float(model.g(x[None], eq.flow.features(model)[j])[0])
        inner = Equilibrium(model, sj, eq.flow.measures[j], TimeGrid(sj, model.T, g.K - j), params)
        return value(model, sj, x, None, equilibrium=inner)

    lo, hi = max(0, k - h_nodes), min(g.K, k + h_nodes)
    u_lo, u_hi = u(lo), u(hi)
    du = (u_hi - u_lo) / (g.nodes[hi] - g.nodes[lo])
    centre = Equilibrium(model, s, eq.flow.measures[k], TimeGrid(s, model.T, g.K - k), params)
    DxV, Dx2V = grad_value(model, s, x, None, equilibrium=centre)
    Hval = _hamiltonian_terms(model, s, x, eq.flow.measures[k], DxV, Dx2V)
    return float(du + Hval)


@dataclass
class ValueReport:
    V: float
    D_xV: np.ndarray
    D_x2V: np.ndarray
    dt_V: float | None
    lfd: dict | None
    diagnostics: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        lfd = None
        if self.lfd is not None:
            lfd = {k: np.asarray(v).tolist() for k, v in self.lfd.items()}
        return {"V": self.V, "D_xV": np.asarray(self.D_xV).tolist(),
                "D_x2V": np.asarray(self.D_x2V).tolist(), "dt_V": self.dt_V, "lfd": lfd,
                "diagnostics": self.diagnostics}


def value_report(model, t: float, x, mu, probes=None, grid: TimeGrid | None = None,
                 params: SolverParams | None = None) -> ValueReport:
    """All value derivatives at one point, sharing the underlying solves."""
    eq = Equilibrium(model, t, mu, grid, params)
    V = value(model, t, x, mu, equilibrium=eq)
    DxV, Dx2V = grad_value(model, t, x, mu, equilibrium=eq)
    dtV = dt_value(model, t, x, mu, equilibrium=eq) if model.has_A4() else None
    lfd = None
    if probes is not None:
        second = model.n == 1 and model.d == 1
        lfd = lfd_value(model, t, x, mu, probes, second_order=second, equilibrium=eq)
    diag = {"particles": eq.params.N, "steps": eq.grid.K,
            "player_sweeps": eq.player(x).sweeps,
            "equilibrium_sweeps": eq.solution.sweeps if eq.solution is not None else 0}
    return ValueReport(V, DxV, Dx2V, dtV, lfd, diag)
