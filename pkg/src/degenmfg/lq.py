"""Exact linear-quadratic reference solutions.

The value of an LQ game is ``V0(t) + V1(t).x + x.V2(t).x / 2`` where V2 solves a
matrix Riccati equation and V1, V0 solve linear ODEs driven by V2. When the
data depend on the population only through its mean, the equilibrium mean and
V1 solve a linear two-point boundary problem, handled here by shooting on the
terminal mean.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable, Union

import numpy as np

from ._grid import TimeGrid
from .errors import BlowUp, UnsupportedMeasureDependence
from .measure import ParticleMeasure, as_measure

Coef = Union[np.ndarray, float, Callable[[float], np.ndarray]]

_COUPLING_FIELDS = ("B0m", "S0m", "f0m", "F0m", "F1m", "F2m", "g0m", "G0m", "G1m")


@dataclass
class LQModel:
    """Coefficient record for linear dynamics and quadratic costs.

    Shapes: ``b0 (n,)``, ``b1 (n, n)``, ``b2 (n, d)``, ``sigma0 (n, n)`` with
    column j the j-th diffusion column, ``sigma1 (n, n, n)`` with ``sigma1[j]``
    multiplying x in column j. Cost data ``F1 (n, n)``, ``F2 (d, d)``,
    ``G (n, n)``, ``f0`` scalar, ``f1 (n,)``, ``f2 (d,)``, ``g0`` scalar,
    ``g1 (n,)``. Time-dependent entries may be callables of s.

    Mean coupling (all optional, constant): ``b0 += B0m @ mean``,
    ``sigma0[:, j] += S0m[j] @ mean``, ``f0 += f0m @ mean + mean @ F0m @ mean / 2``,
    ``f1 += F1m @ mean``, ``f2 += F2m @ mean``, ``g0 += g0m @ mean + mean @ G0m @ mean / 2``,
    ``g1 += G1m @ mean``.
    """

    n: int
    d: int
    T: float = 1.0
    b0: Coef = None
    b1: Coef = None
    b2: Coef = None
    sigma0: Coef = None
    sigma1: Coef = None
    F1: Coef = None
    F2: Coef = None
    G: np.ndarray = None
    f0: Coef = 0.0
    f1: Coef = None
    f2: Coef = None
    g0: float = 0.0
    g1: np.ndarray = None
    B0m: np.ndarray = None
    S0m: np.ndarray = None
    f0m: np.ndarray = None
    F0m: np.ndarray = None
    F1m: np.ndarray = None
    F2m: np.ndarray = None
    g0m: np.ndarray = None
    G0m: np.ndarray = None
    G1m: np.ndarray = None
    blowup_bound: float = 1e8

    def __post_init__(self):
        n, d = self.n, self.d
        zeros = {
            "b0": (n,), "b1": (n, n), "b2": (n, d), "sigma0": (n, n), "sigma1": (n, n, n),
            "F1": (n, n), "F2": (d, d), "G": (n, n), "f1": (n,), "f2": (d,), "g1": (n,),
            "B0m": (n, n), "S0m": (n, n, n), "f0m": (n,), "F0m": (n, n), "F1m": (n, n),
            "F2m": (d, n), "g0m": (n,), "G0m": (n, n), "G1m": (n, n),
        }
        for name, shape in zeros.items():
            val = getattr(self, name)
            if val is None:
                if name == "F2":
                    val = np.eye(d)
                else:
                    val = np.zeros(shape)
            if not callable(val):
                val = np.array(val, dtype=float).reshape(shape)
            setattr(self, name, val)
        for name in ("f0", "g0"):
            val = getattr(self, name)
            if not callable(val):
                setattr(self, name, float(val))

    # coefficient access -------------------------------------------------
    def at(self, name: str, s: float) -> np.ndarray:
        val = getattr(self, name)
        return np.asarray(val(s), dtype=float) if callable(val) else val

    @property
    def mean_coupled(self) -> bool:
        return any(np.any(getattr(self, c) != 0) for c in _COUPLING_FIELDS)

    @property
    def measure_independent(self) -> bool:
        return not self.mean_coupled

    def replace(self, **changes) -> "LQModel":
        kwargs = {f.name: getattr(self, f.name) for f in fields(self)}
        kwargs.update(changes)
        return LQModel(**kwargs)

    # mean-dependent data --------------------------------------------------
    def b0_at(self, s, mean):
        return self.at("b0", s) + self.B0m @ mean

    def sigma0_at(self, s, mean):
        return self.at("sigma0", s) + np.einsum("jab,b->aj", self.S0m, mean)

    def f0_at(self, s, mean):
        return float(self.at("f0", s) + self.f0m @ mean + 0.5 * mean @ self.F0m @ mean)

    def f1_at(self, s, mean):
        return self.at("f1", s) + self.F1m @ mean

    def f2_at(self, s, mean):
        return self.at("f2", s) + self.F2m @ mean

    def g0_at(self, mean):
        return float(self.g0 + self.g0m @ mean + 0.5 * mean @ self.G0m @ mean)

    def g1_at(self, mean):
        return self.g1 + self.G1m @ mean


@dataclass
class LQValue:
    """Oracle paths on a grid: ``V2 (K+1, n, n)``, ``V1 (K+1, n)``, ``V0 (K+1,)``.

    ``mean`` and ``cov`` hold the equilibrium population moments when known.
    """

    grid: TimeGrid
    V2: np.ndarray
    V1: np.ndarray
    V0: np.ndarray
    mean: np.ndarray | None = None
    cov: np.ndarray | None = None

    def value(self, k: int, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(self.V0[k] + self.V1[k] @ x + 0.5 * x @ self.V2[k] @ x)

    def gradient(self, k: int, x) -> np.ndarray:
        return self.V1[k] + self.V2[k] @ np.asarray(x, dtype=float)


def _riccati_rhs(lq: LQModel, s: float, V: np.ndarray) -> np.ndarray:
    b1, b2, s1 = lq.at("b1", s), lq.at("b2", s), lq.at("sigma1", s)
    F2inv = np.linalg.inv(lq.at("F2", s))
    quad = np.einsum("jba,bc,jcd->ad", s1, V, s1)
    # dV/ds written for a forward-in-s integrator; callers step with -dt
    return -(quad - V @ b2 @ F2inv @ b2.T @ V + V @ b1 + b1.T @ V + lq.at("F1", s))


def _check_finite(arr, bound, what):
    if not np.all(np.isfinite(arr)) or np.max(np.abs(arr)) > bound:
        raise BlowUp(f"{what} exceeded {bound:g} (finite escape)")


def solve_riccati(lq: LQModel, grid: TimeGrid) -> np.ndarray:
    """V2 on the grid nodes by classical RK4 backward from V2(T) = G."""
    K, h = grid.K, grid.dt
    s = grid.nodes
    out = np.empty((K + 1, lq.n, lq.n))
    V = np.array(lq.G, dtype=float)
    out[K] = V
    for k in range(K - 1, -1, -1):
        t1 = s[k + 1]
        k1 = _riccati_rhs(lq, t1, V)
        k2 = _riccati_rhs(lq, t1 - h / 2, V - h / 2 * k1)
        k3 = _riccati_rhs(lq, t1 - h / 2, V - h / 2 * k2)
        k4 = _riccati_rhs(lq, t1 - h, V - h * k3)
        V = V - h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        V = 0.5 * (V + V.T)
        _check_finite(V, lq.blowup_bound, "Riccati solution")
        out[k] = V
    return out


def _backward_rhs(lq: LQModel, s: float, state: dict) -> dict:
    """Time derivative of (V2, V1, V0, mean) along the equilibrium."""
    V2, V1, m = state["V2"], state["V1"], state["m"]
    b1, b2 = lq.at("b1", s), lq.at("b2", s)
    s1 = lq.at("sigma1", s)
    F2inv = np.linalg.inv(lq.at("F2", s))
    b0 = lq.b0_at(s, m)
    s0 = lq.sigma0_at(s, m)
    f2 = lq.f2_at(s, m)
    w = b2.T @ V1 + f2
    closed = b1 - b2 @ F2inv @ b2.T @ V2
    dV2 = _riccati_rhs(lq, s, V2)
    dV1 = -(closed.T @ V1 + np.einsum("jba,bc,cj->a", s1, V2, s0) + V2 @ b0
            - V2 @ b2 @ F2inv @ f2 + lq.f1_at(s, m))
    dV0 = -(0.5 * np.einsum("aj,ab,bj->", s0, V2, s0) + lq.f0_at(s, m)
            - f2 @ F2inv @ w + 0.5 * w @ F2inv @ w + V1 @ (b0 - b2 @ F2inv @ w))
    dm = closed @ m + b0 - b2 @ F2inv @ w
    return {"V2": dV2, "V1": dV1, "V0": np.asarray(dV0), "m": dm}


def _integrate_backward(lq: LQModel, grid: TimeGrid, m_T: np.ndarray) -> dict:
    K, h = grid.K, grid.dt
    s = grid.nodes
    state = {
        "V2": np.array(lq.G, dtype=float),
        "V1": lq.g1_at(m_T),
        "V0": np.asarray(lq.g0_at(m_T)),
        "m": np.array(m_T, dtype=float),
    }
    paths = {key: np.empty((K + 1,) + np.shape(val)) for key, val in state.items()}
    for key in state:
        paths[key][K] = state[key]

    def axpy(a, st, dst):
        return {key: st[key] + a * dst[key] for key in st}

    for k in range(K - 1, -1, -1):
        t1 = s[k + 1]
        k1 = _backward_rhs(lq, t1, state)
        k2 = _backward_rhs(lq, t1 - h / 2, axpy(-h / 2, state, k1))
        k3 = _backward_rhs(lq, t1 - h / 2, axpy(-h / 2, state, k2))
        k4 = _backward_rhs(lq, t1 - h, axpy(-h, state, k3))
        state = {key: state[key] - h / 6 * (k1[key] + 2 * k2[key] + 2 * k3[key] + k4[key])
                 for key in state}
        state["V2"] = 0.5 * (state["V2"] + state["V2"].T)
        _check_finite(state["V2"], lq.blowup_bound, "Riccati solution")
        for key in state:
            paths[key][k] = state[key]
    return paths


def solve_v1(lq: LQModel, grid: TimeGrid) -> np.ndarray:
    """V1 path for measure-independent data (linear ODE backward from g1)."""
    if lq.mean_coupled:
        raise UnsupportedMeasureDependence("solve_v1 needs measure-independent data; "
                                           "use lq_equilibrium_flow")
    return _integrate_backward(lq, grid, np.zeros(lq.n))["V1"]


def solve_v0(lq: LQModel, grid: TimeGrid, mu: ParticleMeasure | None = None) -> np.ndarray:
    """V0 path. Mean-coupled data are evaluated along the equilibrium mean."""
    if lq.mean_coupled:
        if mu is None:
            raise UnsupportedMeasureDependence("mean-coupled V0 needs the initial measure")
        return lq_equilibrium_flow(lq, grid.t0, mu, grid).V0
    return _integrate_backward(lq, grid, np.zeros(lq.n))["V0"]


def _closed_loop_cov(lq: LQModel, grid: TimeGrid, fine: dict, cov0: np.ndarray) -> np.ndarray:
    """Covariance ODE integrated with RK4 on ``grid``; ``fine`` holds paths on the 2x grid."""
    K, h = grid.K, grid.dt
    s = grid.nodes
    out = np.empty((K + 1, lq.n, lq.n))
    P = np.array(cov0, dtype=float)
    out[0] = P

    def rhs(t, idx, P):
        V2, m = fine["V2"][idx], fine["m"][idx]
        b1, b2, s1 = lq.at("b1", t), lq.at("b2", t), lq.at("sigma1", t)
        A = b1 - b2 @ np.linalg.inv(lq.at("F2", t)) @ b2.T @ V2
        cols = lq.sigma0_at(t, m) + np.einsum("jab,b->aj", s1, m)
        return A @ P + P @ A.T + np.einsum("jab,bc,jdc->ad", s1, P, s1) + cols @ cols.T

    for k in range(K):
        t = s[k]
        k1 = rhs(t, 2 * k, P)
        k2 = rhs(t + h / 2, 2 * k + 1, P + h / 2 * k1)
        k3 = rhs(t + h / 2, 2 * k + 1, P + h / 2 * k2)
        k4 = rhs(t + h, 2 * k + 2, P + h * k3)
        P = P + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        P = 0.5 * (P + P.T)
        out[k + 1] = P
    return out


def lq_equilibrium_flow(lq: LQModel, t: float, mu, grid: TimeGrid | None = None,
                        K: int = 400) -> LQValue:
    """Equilibrium mean/covariance paths together with V2, V1, V0 along them.

    The mean solves a forward ODE while V1 solves a backward one with terminal
    data depending on the terminal mean. Both are affine in the terminal mean,
    so shooting on it needs ``n + 1`` backward integrations.
    """
    mu = as_measure(mu)
    if grid is None:
        grid = TimeGrid(t, lq.T, K)
    fine_grid = grid.refine(2)
    m0 = mu.points.mean(axis=0)
    cov0 = np.cov(mu.points.T, bias=True).reshape(lq.n, lq.n)
    # the terminal mean enters affinely; shoot on it (also valid without coupling)
    base = _integrate_backward(lq, fine_grid, np.zeros(lq.n))["m"][0]
    jac = np.empty((lq.n, lq.n))
    for c in range(lq.n):
        e = np.zeros(lq.n)
        e[c] = 1.0
        jac[:, c] = _integrate_backward(lq, fine_grid, e)["m"][0] - base
    m_T = np.linalg.solve(jac, m0 - base)
    fine = _integrate_backward(lq, fine_grid, m_T)
    cov = _closed_loop_cov(lq, grid, fine, cov0)
    sl = slice(None, None, 2)
    return LQValue(grid, fine["V2"][sl], fine["V1"][sl], fine["V0"][sl], fine["m"][sl], cov)


def lq_oracle(lq: LQModel, t: float, mu, K: int = 400) -> LQValue:
    """All oracle paths on ``[t, T]`` with ``K`` steps."""
    return lq_equilibrium_flow(lq, t, mu, TimeGrid(t, lq.T, K))


def lq_value_and_feedback(lq: LQModel, t: float, x, mu, K: int = 400):
    """(V, D_xV, optimal control) at time t for state x and population mu."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    sol = lq_oracle(lq, t, mu, K)
    grad = sol.gradient(0, x)
    f2 = lq.f2_at(t, sol.mean[0])
    v = -np.linalg.solve(lq.at("F2", t), lq.at("b2", t).T @ grad + f2)
    return sol.value(0, x), grad, v


def lq_mean_sensitivity(lq: LQModel, t: float, x, mu, h: float = 1e-3, K: int = 400) -> float:
    """Derivative of V(t, x, mu) under a uniform shift of all atoms (first coordinate).

    For mean-coupled data the value is quadratic in the initial mean, so the
    central difference is exact up to rounding.
    """
    mu = as_measure(mu)
    shift = np.zeros(mu.n)
    shift[0] = h
    up = lq_value_and_feedback(lq, t, x, ParticleMeasure(mu.points + shift), K)[0]
    dn = lq_value_and_feedback(lq, t, x, ParticleMeasure(mu.points - shift), K)[0]
    return (up - dn) / (2 * h)
