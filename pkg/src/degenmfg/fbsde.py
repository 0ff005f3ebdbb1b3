"""Least-squares Monte Carlo solvers for the forward-backward systems.

Two problems share one engine:

* the mean-field game, where the population law at each node is the law of
  the simulated cloud itself (``solve_mfg``);
* the control problem of a single player started at x against a frozen
  population flow (``solve_control``).

A Picard sweep runs a backward regression pass that produces a polynomial
feedback ``P_k(y), Q_k(y)`` for the costate, then a forward Euler-Maruyama
pass driven by ``v = v_hat(y, m_k, P_k(y), Q_k(y))``. Feedback coefficients
are damped between sweeps. All sweeps reuse one Brownian increment tensor.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from itertools import combinations_with_replacement

import numpy as np

from . import kernels
from ._grid import TimeGrid
from .errors import (DimensionError, DivergenceError, FlowDivergence, PicardDivergence,
                     SingularHessian)
from .hamiltonian import control_map, diffusion, drift, dx_hamiltonian
from .measure import ParticleMeasure, as_measure

__all__ = ["TimeGrid", "SolverParams", "FbsdeSolution", "MeasureFlow", "NodeBasis",
           "brownian_increments", "solve_control", "solve_mfg", "bsde_residual",
           "stability_probe", "flow_distance"]

BLOWUP = 1e8


@dataclass(frozen=True)
class SolverParams:
    """Numerical settings shared by every solver.

    Attributes
    ----------
    N : int
        Particle (Monte Carlo path) count.
    degree : int
        Total degree of the polynomial regression basis.
    theta : float
        Damping weight given to the newest feedback, in (0, 1].
    max_sweeps : int
        Picard sweep budget for one solve.
    tol : float
        Stop when the sup-change of (Y, p) between sweeps is below
        ``tol * (1 + sup|Y| + sup|p|)``.
    flow_tol : float
        Stop the population fixed point when the largest per-node W2 change is
        below this.
    continuation_steps : int
        Number of homotopy stages used after a stall.
    seed : int
        Seed of the shared Brownian increments.
    """

    N: int = 10_000
    degree: int = 2
    theta: float = 0.5
    max_sweeps: int = 60
    tol: float = 1e-7
    flow_tol: float = 1e-6
    continuation_steps: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.N < 1 or self.max_sweeps < 1 or self.continuation_steps < 1:
            raise ValueError("N, max_sweeps and continuation_steps must be positive")
        if self.degree < 0:
            raise ValueError("degree must be nonnegative")
        if not 0 < self.theta <= 1:
            raise ValueError("theta must lie in (0, 1]")
        if not (self.tol > 0 and self.flow_tol > 0):
            raise ValueError("tolerances must be positive")

    def replace(self, **changes) -> "SolverParams":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw.update(changes)
        return SolverParams(**kw)


def brownian_increments(seed: int, N: int, K: int, n: int, dt: float) -> np.ndarray:
    """Increments ``dB[k, i, j]`` of an n-dimensional Brownian motion, shape (K, N, n)."""
    rng = np.random.default_rng([int(seed), int(N), int(K), int(n)])
    return rng.standard_normal((K, N, n)) * np.sqrt(dt)


def monomial_exponents(n: int, degree: int) -> np.ndarray:
    rows = [np.zeros(n, dtype=int)]
    for deg in range(1, degree + 1):
        for combo in combinations_with_replacement(range(n), deg):
            e = np.zeros(n, dtype=int)
            for c in combo:
                e[c] += 1
            rows.append(e)
    return np.array(rows, dtype=int)


class NodeBasis:
    """Polynomial regression basis at one time node.

    The monomials act on standardised coordinates ``z = (y - center) / scale``
    and are fitted through a rank-truncated normal-equation inverse, so collapsed clouds
    (all particles at one point) are handled without special cases.
    """

    def __init__(self, Y: np.ndarray, exps: np.ndarray, dB: np.ndarray | None = None,
                 dt: float | None = None, center=None, scale=None):
        self.exps = exps
        self.center = Y.mean(axis=0) if center is None else center
        if scale is None:
            sd = Y.std(axis=0)
            scale = np.where(sd > 1e-12 * (1 + np.abs(self.center)), sd, 1.0)
        self.scale = scale
        self.N = Y.shape[0]
        self.phi = self.design(Y)
        self._M = self._pseudo_inverse(self.phi)
        self.joint = dB is not None
        if self.joint:
            self.dt = dt
            xi = dB / np.sqrt(dt)
            self._D = np.concatenate(
                [self.phi] + [self.phi * xi[:, j:j + 1] for j in range(dB.shape[1])], axis=1)
            self._Mj = self._pseudo_inverse(self._D)

    @staticmethod
    def _pseudo_inverse(D):
        """(D^T D)^+ restricted to well-determined directions."""
        w, V = np.linalg.eigh(D.T @ D)
        keep = w > 1e-13 * max(w[-1], 1e-300)
        return (V[:, keep] / w[keep]) @ V[:, keep].T

    @property
    def m(self) -> int:
        return self.exps.shape[0]

    def design(self, Y: np.ndarray) -> np.ndarray:
        return kernels.poly_design((Y - self.center) / self.scale, self.exps)

    def design_grad(self, Y: np.ndarray) -> np.ndarray:
        """d phi_m / d y_l, shape (N, m, n)."""
        z = (Y - self.center) / self.scale
        out = np.zeros((Y.shape[0], self.m, Y.shape[1]))
        for l in range(Y.shape[1]):
            e = self.exps.copy()
            c = e[:, l].astype(float)
            e[:, l] = np.maximum(e[:, l] - 1, 0)
            out[:, :, l] = kernels.poly_design(z, e) * c / self.scale[l]
        return out

    def project(self, target: np.ndarray):
        """Least-squares fit on the basis; returns (fitted, monomial coefficients)."""
        t = target.reshape(self.N, -1)
        coef = self._M @ (self.phi.T @ t)
        fitted = self.phi @ coef
        return fitted.reshape(target.shape), coef.reshape((self.m,) + target.shape[1:])

    def project_joint(self, target: np.ndarray):
        """Fit on ``[phi, phi * dB^j / sqrt(dt)]``.

        Returns the conditional mean part ``phi a`` (fitted values and
        coefficients ``a``) and, per column j, coefficients ``b_j`` so that
        ``E[target dB^j | y] / dt = phi(y) b_j / sqrt(dt)``.
        """
        t = target.reshape(self.N, -1)
        coef = self._Mj @ (self._D.T @ t)
        a = coef[:self.m]
        b = coef[self.m:].reshape(-1, self.m, t.shape[1])
        shape = target.shape[1:]
        return ((self.phi @ a).reshape(target.shape), a.reshape((self.m,) + shape),
                b.reshape((b.shape[0], self.m) + shape))


@dataclass
class MeasureFlow:
    """Population laws ``m_0 .. m_K`` on a time grid."""

    grid: TimeGrid
    measures: list

    def __post_init__(self):
        self.measures = [as_measure(m) for m in self.measures]
        if len(self.measures) != self.grid.K + 1:
            raise DimensionError("a flow needs one measure per grid node")
        if len({m.n for m in self.measures}) != 1:
            raise DimensionError("flow measures must share one dimension")

    @property
    def n(self) -> int:
        return self.measures[0].n

    def features(self, model) -> np.ndarray:
        return np.array([model.features(m) for m in self.measures])

    def restrict(self, t: float) -> "MeasureFlow":
        """Tail of the flow starting at the node equal to ``t``."""
        k = self.grid.index_of(t)
        sub = TimeGrid(self.grid.nodes[k], self.grid.T, self.grid.K - k)
        return MeasureFlow(sub, self.measures[k:])

    @classmethod
    def constant(cls, grid: TimeGrid, m) -> "MeasureFlow":
        m = as_measure(m)
        return cls(grid, [m] * (grid.K + 1))


@dataclass
class FbsdeSolution:
    """Particle paths ``Y, p (K+1, N, n)``, ``q (K+1, N, n, n)``, ``v (K+1, N, d)``.

    ``F`` holds the population features used at each node and ``dB`` the
    Brownian increments. ``feedback`` keeps the fitted costate maps so that
    linearised flows can reuse them.
    """

    grid: TimeGrid
    Y: np.ndarray
    p: np.ndarray
    q: np.ndarray
    v: np.ndarray
    dB: np.ndarray
    F: np.ndarray
    kind: str
    sweeps: int = 0
    trace: list = field(default_factory=list)
    feedback: dict = field(default_factory=dict, repr=False)
    flow_distance: float = 0.0

    @property
    def N(self) -> int:
        return self.Y.shape[1]

    def costate_slope(self, k: int) -> np.ndarray:
        """Derivative of the fitted costate map at the particles, shape (N, n, n)."""
        if k == self.grid.K:
            return self.feedback["gxx"]
        basis = self.feedback["bases"][k]
        G = basis.design_grad(self.Y[k])
        return np.einsum("iml,ma->ial", G, self.feedback["P"][k])

    def to_csv(self, path, flow_kind: str | None = None) -> None:
        K, N, n = self.Y.shape
        d = self.v.shape[2]
        head = ["node", "particle"] + [f"Y{a}" for a in range(n)] + [f"p{a}" for a in range(n)]
        head += [f"q{a}{j}" for a in range(n) for j in range(n)] + [f"v{c}" for c in range(d)]
        prefix = [] if flow_kind is None else [flow_kind]
        write_path_csv(path, head, [(prefix, self.Y, self.p, self.q, self.v)], flow_kind)

    def flow(self) -> MeasureFlow:
        return MeasureFlow(self.grid, [ParticleMeasure(y) for y in self.Y])


def write_path_csv(path, head, blocks, flow_kind=None) -> None:
    """Write ``(prefix, Y, p, q, v)`` path blocks, one row per node and particle.

    Floats use 17 significant digits, which round-trips every double exactly.
    """
    if flow_kind is not None:
        head = ["flow_kind"] + head
    with open(path, "w", newline="") as fh:
        fh.write(",".join(head) + "\n")
        for prefix, Y, p, q, v in blocks:
            K1, N, n = Y.shape
            idx = np.stack(np.meshgrid(np.arange(K1), np.arange(N), indexing="ij"), axis=-1)
            vals = np.concatenate([Y, p, q.reshape(K1, N, -1), v], axis=2)
            fmt = ",".join([str(x) for x in prefix] + ["%d", "%d"] + ["%.17g"] * vals.shape[2])
            table = np.concatenate([idx, vals], axis=2).reshape(K1 * N, -1)
            np.savetxt(fh, table, fmt=fmt)


def flow_distance(Ya: np.ndarray, Yb: np.ndarray) -> float:
    """Largest per-node W2 distance between two particle-cloud paths.

    Exact in one dimension; for n >= 2 the index coupling gives an upper bound.
    """
    if Ya.shape[2] == 1:
        out = 0.0
        for a, b in zip(Ya[..., 0], Yb[..., 0]):
            sq = kernels.w2_sq_sorted_1d(np.sort(a), np.sort(b))
            out = max(out, float(np.sqrt(max(sq, 0.0))))
        return out
    return float(np.sqrt(np.max(np.mean(np.sum((Ya - Yb) ** 2, axis=2), axis=1))))


# ---------------------------------------------------------------------------
# core engine
# ---------------------------------------------------------------------------

class _Engine:
    def __init__(self, model, grid: TimeGrid, params: SolverParams, Y0: np.ndarray,
                 F_fixed: np.ndarray | None):
        self.model, self.grid, self.params = model, grid, params
        self.n, self.d = model.n, model.d
        self.K, self.dt = grid.K, grid.dt
        self.N = Y0.shape[0]
        self.Y0 = Y0
        self.F_fixed = F_fixed
        self.dB = brownian_increments(params.seed, self.N, self.K, self.n, self.dt)
        self.exps = monomial_exponents(self.n, params.degree)
        self.frames = None  # per-node (center, scale), frozen so damping mixes like with like

    def forward(self, P, Q, bases):
        """Simulate with feedback (P, Q); ``P is None`` means v = 0."""
        model, K, dt = self.model, self.K, self.dt
        Y = np.empty((K + 1, self.N, self.n))
        V = np.zeros((K + 1, self.N, self.d))
        F = np.empty((K + 1, model.r))
        Y[0] = self.Y0
        s = self.grid.nodes
        for k in range(K):
            F[k] = self.F_fixed[k] if self.F_fixed is not None else model.features(Y[k])
            if P is None:
                v = np.zeros((self.N, self.d))
            else:
                phi = bases[k].design(Y[k])
                p = phi @ P[k]
                q = np.einsum("im,maj->iaj", phi, Q[k])
                v = control_map(model, s[k], Y[k], F[k], p, q)
            V[k] = v
            Y[k + 1] = (Y[k] + drift(model, s[k], Y[k], F[k], v) * dt
                        + np.einsum("iaj,ij->ia", diffusion(model, s[k], Y[k], F[k], v), self.dB[k]))
            if not np.all(np.isfinite(Y[k + 1])) or np.abs(Y[k + 1]).max() > BLOWUP:
                raise _Stall("forward paths blew up")
        F[K] = self.F_fixed[K] if self.F_fixed is not None else model.features(Y[K])
        return Y, F, V

    def backward(self, Y, F, v_fwd):
        model, K, dt, N, n = self.model, self.K, self.dt, self.N, self.n
        s = self.grid.nodes
        p = np.empty((K + 1, N, n))
        q = np.zeros((K + 1, N, n, n))
        P = np.zeros((K, self.exps.shape[0], n))
        Q = np.zeros((K, self.exps.shape[0], n, n))
        bases = []
        p[K] = model.gx(Y[K], F[K])
        if self.frames is None:
            probe = [NodeBasis(Y[k], self.exps) for k in range(K)]
            self.frames = [(b.center, b.scale) for b in probe]
        for k in range(K - 1, -1, -1):
            basis = NodeBasis(Y[k], self.exps, self.dB[k], dt, *self.frames[k])
            pbar, _, b = basis.project_joint(p[k + 1])
            Qk = np.transpose(b, (1, 2, 0)) / np.sqrt(dt)  # (m, a, j)
            q[k] = np.einsum("im,maj->iaj", basis.phi, Qk)
            p[k] = pbar + dx_hamiltonian(model, s[k], Y[k], F[k], v_fwd[k], pbar, q[k]) * dt
            _, P[k] = basis.project(p[k])
            Q[k] = Qk
            bases.append(basis)
            if not np.all(np.isfinite(p[k])) or np.abs(p[k]).max() > BLOWUP:
                raise _Stall("costate blew up")
        bases.reverse()
        return p, q, P, Q, bases

    def controls(self, Y, F, p, q):
        s = self.grid.nodes
        return np.stack([control_map(self.model, s[k], Y[k], F[k], p[k], q[k])
                         for k in range(self.K + 1)])

    def run(self, warm=None, flow_tol=None):
        """Damped Picard iteration; returns the converged solution pieces."""
        params = self.params
        theta = params.theta
        if warm is None:
            Y, F, v_fwd = self.forward(None, None, None)
            P = Q = None
        else:
            P, Q, bases = warm
            self.frames = [(b.center, b.scale) for b in bases]
            Y, F, v_fwd = self.forward(P, Q, bases)
        p_old = None
        trace = []
        for sweep in range(1, params.max_sweeps + 1):
            p, q, Pn, Qn, bases = self.backward(Y, F, v_fwd)
            if P is None:
                P, Q = Pn, Qn
            else:
                P = theta * Pn + (1 - theta) * P
                Q = theta * Qn + (1 - theta) * Q
            Y_new, F_new, v_fwd = self.forward(P, Q, bases)
            dY = float(np.abs(Y_new - Y).max())
            dp = float(np.abs(p - p_old).max()) if p_old is not None else np.inf
            scale = 1.0 + float(np.abs(Y_new).max()) + float(np.abs(p).max())
            dist = flow_distance(Y_new, Y) if flow_tol is not None else 0.0
            trace.append({"sweep": sweep, "dY": dY, "dp": dp, "flow": dist})
            Y, F, p_old = Y_new, F_new, p
            if max(dY, dp) <= params.tol * scale and (flow_tol is None or dist <= flow_tol):
                break
        else:
            raise _Stall("Picard sweeps exhausted", trace)
        p, q, Pn, Qn, bases = self.backward(Y, F, v_fwd)
        v = self.controls(Y, F, p, q)
        return {"Y": Y, "F": F, "p": p, "q": q, "v": v, "P": Pn, "Q": Qn, "bases": bases,
                "trace": trace, "sweeps": len(trace),
                "warm": (Pn, Qn, bases)}


class _Stall(Exception):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


def _package(model, grid, engine, out, kind, flow_dist=0.0) -> FbsdeSolution:
    feedback = {"P": out["P"], "Q": out["Q"], "bases": out["bases"],
                "gxx": np.asarray(model.gxx(out["Y"][-1], out["F"][-1]), dtype=float)}
    return FbsdeSolution(grid=grid, Y=out["Y"], p=out["p"], q=out["q"], v=out["v"],
                         dB=engine.dB, F=out["F"], kind=kind, sweeps=out["sweeps"],
                         trace=out["trace"], feedback=feedback, flow_distance=flow_dist)


def _grid_for(model, t, grid):
    if grid is None:
        return TimeGrid(float(t), model.T, 50)
    if abs(grid.t0 - t) > 1e-12 or abs(grid.T - model.T) > 1e-12:
        raise DimensionError("grid must span [t, T]")
    return grid


def solve_control(model, t: float, x, flow: MeasureFlow, grid: TimeGrid | None = None,
                  params: SolverParams | None = None) -> FbsdeSolution:
    """Optimal control of one player from x against a frozen population flow."""
    params = params or SolverParams()
    grid = _grid_for(model, t, grid if grid is not None else flow.grid)
    if flow.grid.K != grid.K or abs(flow.grid.t0 - grid.t0) > 1e-12:
        if flow.grid.t0 < grid.t0:
            flow = flow.restrict(grid.t0)
        if flow.grid.K != grid.K:
            raise DimensionError("flow and grid must share nodes")
    if flow.n != model.n:
        raise DimensionError("flow dimension does not match the model")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.size != model.n:
        raise DimensionError("x does not match the model dimension")
    Y0 = np.broadcast_to(x, (params.N, model.n)).copy()
    engine = _Engine(model, grid, params, Y0, flow.features(model))
    try:
        out = engine.run()
    except _Stall as exc:
        raise PicardDivergence(str(exc), exc.trace) from None
    return _package(model, grid, engine, out, "control")


def _initial_cloud(mu: ParticleMeasure, N: int) -> np.ndarray:
    """Repeat the atoms of mu to at least N particles, keeping equal weights."""
    reps = max(1, -(-N // mu.size))
    return np.tile(mu.points, (reps, 1))


def solve_mfg(model, t: float, mu, grid: TimeGrid | None = None,
              params: SolverParams | None = None):
    """Equilibrium of the mean-field game started from the particle measure mu.

    Returns ``(solution, flow)``. Particles are the atoms of mu repeated to fill
    N paths (mu itself when it already has N atoms). On a stalled fixed point
    the coupling is switched on gradually and each stage is warm-started.
    """
    params = params or SolverParams()
    mu = as_measure(mu)
    if mu.n != model.n:
        raise DimensionError("mu dimension does not match the model")
    grid = _grid_for(model, t, grid)
    Y0 = _initial_cloud(mu, params.N)
    engine = _Engine(model, grid, params, Y0, None)
    try:
        out = engine.run(flow_tol=params.flow_tol)
    except (_Stall, SingularHessian, DivergenceError) as exc:
        out = _continuation(model, grid, params, Y0, getattr(exc, "trace", []))
    sol = _package(model, grid, engine, out, "mfg",
                   out["trace"][-1]["flow"] if out["trace"] else 0.0)
    return sol, sol.flow()


def _continuation(model, grid, params, Y0, first_trace):
    steps = params.continuation_steps
    warm = None
    out = None
    for i in range(1, steps + 1):
        lam = i / steps
        staged = model.with_coupling_scale(lam)
        engine = _Engine(staged, grid, params, Y0, None)
        try:
            out = engine.run(warm=warm, flow_tol=params.flow_tol)
        except _Stall as exc:
            dists = [t["flow"] for t in (exc.trace or first_trace)][-2:]
            raise FlowDivergence(
                f"population fixed point failed at coupling {lam:g}; last flow distances {dists}",
                exc.trace or first_trace) from None
        warm = out["warm"]
    return out


def bsde_residual(model, solution: FbsdeSolution, flow: MeasureFlow | None = None) -> float:
    """Largest RMS size of the regressed one-step defect of the backward equation."""
    grid = solution.grid
    Fk = flow.features(model) if flow is not None else solution.F
    exps = monomial_exponents(model.n, 2)
    worst = 0.0
    for k in range(grid.K):
        s = grid.nodes[k]
        Y, p, q, v = solution.Y[k], solution.p[k], solution.q[k], solution.v[k]
        defect = (solution.p[k + 1] - p + dx_hamiltonian(model, s, Y, Fk[k], v, p, q) * grid.dt
                  - np.einsum("iaj,ij->ia", q, solution.dB[k]))
        fitted, _ = NodeBasis(Y, exps).project(defect)
        worst = max(worst, float(np.sqrt(np.mean(np.sum(fitted ** 2, axis=1)))))
    return worst


def stability_probe(model, t: float, mu, mu_prime, grid: TimeGrid | None = None,
                    params: SolverParams | None = None) -> float:
    """sup_k E|Theta'_k - Theta_k|^2 / E|xi' - xi|^2 for atom-wise coupled initial laws."""
    mu, mu_prime = as_measure(mu), as_measure(mu_prime)
    if mu.size != mu_prime.size:
        raise DimensionError("stability_probe couples atoms one to one; sizes must agree")
    shift = float(np.mean(np.sum((mu_prime.points - mu.points) ** 2, axis=1)))
    if shift == 0.0:
        return 0.0
    a, _ = solve_mfg(model, t, mu, grid, params)
    b, _ = solve_mfg(model, t, mu_prime, grid, params)
    gap = np.mean(np.sum((a.Y - b.Y) ** 2, axis=2) + np.sum((a.p - b.p) ** 2, axis=2), axis=1)
    return float(gap.max() / shift)
