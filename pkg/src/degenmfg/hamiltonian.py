"""Lagrangian, optimal control map, Hamiltonian and their sensitivities.

The point-wise functions (``lagrangian``, ``minimize_v``, ``hamiltonian``,
``optimality_residual``) take a single state and a population. The ``*_batch``
helpers and :func:`control_map` work on particle arrays ``Y (N, n)`` with a
precomputed feature vector ``F`` and are what the solvers call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NewtonDivergence, SingularHessian

NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 50


@dataclass(frozen=True)
class Costate:
    """Adjoint pair: ``p`` in R^n and ``q`` in R^{n x n} with columns ``q^j``."""

    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        p = np.atleast_1d(np.asarray(self.p, dtype=float))
        q = np.asarray(self.q, dtype=float)
        if q.ndim < 2:
            q = q.reshape(p.size, p.size) if q.size == p.size ** 2 else q
        if p.ndim != 1 or q.shape != (p.size, p.size):
            raise DimensionError(f"costate shapes p {p.shape}, q {q.shape} are inconsistent")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
            raise ValueError("costate has non-finite entries")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)


def _costate(c, n: int) -> Costate:
    c = c if isinstance(c, Costate) else Costate(*c)
    if c.p.size != n:
        raise DimensionError(f"costate dimension {c.p.size} does not match n = {n}")
    return c


def _point(model, x, v=None):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.size != model.n:
        raise DimensionError(f"state dimension {x.size} does not match n = {model.n}")
    if v is None:
        return x[None, :]
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if v.size != model.d:
        raise DimensionError(f"control dimension {v.size} does not match d = {model.d}")
    return x[None, :], v[None, :]


# ---------------------------------------------------------------------------
# batched building blocks
# ---------------------------------------------------------------------------

def drift(model, s, Y, F, v) -> np.ndarray:
    """b(s, Y, m, v) for every particle, shape (N, n)."""
    return model.b0(s, F) + Y @ model.b1(s).T + v @ model.b2(s).T


def diffusion(model, s, Y, F, v) -> np.ndarray:
    """sigma(s, Y, m, v) with columns on the last axis, shape (N, n, n)."""
    return (model.sig0(s, F)[None]
            + np.einsum("jab,ib->iaj", model.sig1(s), Y)
            + np.einsum("jac,ic->iaj", model.sig2(s), v))


def lagrangian_batch(model, s, Y, F, v, p, q) -> np.ndarray:
    return (np.sum(p * drift(model, s, Y, F, v), axis=1)
            + np.sum(q * diffusion(model, s, Y, F, v), axis=(1, 2))
            + model.f(s, Y, F, v))


def v_gradient(model, s, Y, F, v, p, q) -> np.ndarray:
    """D_v L = b2^T p + sum_j (sigma2^j)^T q^j + D_v f, shape (N, d)."""
    return p @ model.b2(s) + np.einsum("iaj,jac->ic", q, model.sig2(s)) + model.fv(s, Y, F, v)


def dx_hamiltonian(model, s, Y, F, v, p, q) -> np.ndarray:
    """D_x H at the optimal control ``v``: b1^T p + sum_j (sigma1^j)^T q^j + D_x f."""
    return p @ model.b1(s) + np.einsum("iaj,jab->ib", q, model.sig1(s)) + model.fx(s, Y, F, v)


def control_map(model, s, Y, F, p, q, tol: float = NEWTON_TOL,
                max_iter: int = NEWTON_MAX_ITER) -> np.ndarray:
    """Minimiser of the Lagrangian in v for every particle, shape (N, d).

    Uses the model's closed form when it has one, otherwise a damped Newton
    iteration started from v = 0 with a backtracking line search.
    """
    Y = np.asarray(Y, dtype=float).reshape(-1, model.n)
    N = Y.shape[0]
    p = np.asarray(p, dtype=float).reshape(N, model.n)
    q = np.asarray(q, dtype=float).reshape(N, model.n, model.n)
    exact = model.closed_form_control(s, Y, F, p, q)
    if exact is not None:
        return np.asarray(exact, dtype=float).reshape(N, model.d)

    v = np.zeros((N, model.d))
    grad = v_gradient(model, s, Y, F, v, p, q)
    trace = []
    for _ in range(max_iter):
        res = np.linalg.norm(grad, axis=1)
        trace.append(float(res.max()))
        active = res > tol
        if not active.any():
            return v
        idx = np.flatnonzero(active)
        Ya, va, pa, qa = Y[idx], v[idx], p[idx], q[idx]
        H = model.fvv(s, Ya, F, va)
        eig = np.linalg.eigvalsh(0.5 * (H + np.swapaxes(H, 1, 2)))
        scale = np.maximum(np.abs(eig).max(axis=1), 1.0)
        if np.any(np.abs(eig).min(axis=1) < 1e-12 * scale):
            raise SingularHessian("D_v^2 f is numerically singular during the control update")
        step = -np.linalg.solve(H, grad[idx][..., None])[..., 0]
        descent = np.sum(step * grad[idx], axis=1) < 0
        step[~descent] = -grad[idx][~descent]
        L0 = lagrangian_batch(model, s, Ya, F, va, pa, qa)
        t = np.ones(len(idx))
        for _ in range(40):
            Lt = lagrangian_batch(model, s, Ya, F, va + t[:, None] * step, pa, qa)
            ok = Lt <= L0 + 1e-4 * t * np.sum(step * grad[idx], axis=1) + 1e-14 * (1 + np.abs(L0))
            if ok.all():
                break
            t = np.where(ok, t, 0.5 * t)
        v[idx] = va + t[:, None] * step
        grad[idx] = v_gradient(model, s, Y[idx], F, v[idx], pa, qa)
    res = np.linalg.norm(grad, axis=1)
    if res.max() > tol:
        raise NewtonDivergence(f"control update did not converge: residual {res.max():.3e}", trace)
    return v


def control_sensitivities(model, s, Y, F, v) -> dict:
    """Derivatives of the optimal control from the linearised optimality condition.

    Returns ``Jx (N, d, n)``, ``Jp (N, d, n)``, ``Jq (N, d, n, n)`` (last axis is
    the column index j) and ``JF (N, d, r)``, all obtained by solving with
    ``D_v^2 f`` as the system matrix.
    """
    N = Y.shape[0]
    fvv = np.asarray(model.fvv(s, Y, F, v))
    rhs_x = np.swapaxes(model.fxv(s, Y, F, v), 1, 2)
    rhs_p = np.broadcast_to(model.b2(s).T, (N, model.d, model.n))
    sig2 = model.sig2(s)  # (j, a, c)
    rhs_q = np.broadcast_to(np.transpose(sig2, (2, 1, 0)), (N, model.d, model.n, model.n))
    rhs_F = model.fvF(s, Y, F, v)
    try:
        inv = np.linalg.inv(fvv)
    except np.linalg.LinAlgError as exc:
        raise SingularHessian("D_v^2 f is singular") from exc
    return {
        "Jx": -inv @ rhs_x,
        "Jp": -inv @ rhs_p,
        "Jq": -np.einsum("icd,idaj->icaj", inv, rhs_q),
        "JF": -inv @ rhs_F,
        "fvv_inv": inv,
    }


# ---------------------------------------------------------------------------
# point-wise API
# ---------------------------------------------------------------------------

def lagrangian(model, s, x, m, v, costate) -> float:
    """p.b + sum_j q^j.sigma^j + f at a single (s, x, m, v)."""
    c = _costate(costate, model.n)
    Y, V = _point(model, x, v)
    F = model.features(m)
    return float(lagrangian_batch(model, s, Y, F, V, c.p[None], c.q[None])[0])


def minimize_v(model, s, x, m, costate, tol: float = NEWTON_TOL,
               max_iter: int = NEWTON_MAX_ITER) -> np.ndarray:
    c = _costate(costate, model.n)
    Y = _point(model, x)
    F = model.features(m)
    return control_map(model, s, Y, F, c.p[None], c.q[None], tol, max_iter)[0]


def hamiltonian(model, s, x, m, costate) -> float:
    """Infimum of the Lagrangian over v, attained at :func:`minimize_v`."""
    v = minimize_v(model, s, x, m, costate)
    return lagrangian(model, s, x, m, v, costate)


def optimality_residual(model, s, x, m, v, costate) -> float:
    """Euclidean norm of D_v L at v."""
    c = _costate(costate, model.n)
    Y, V = _point(model, x, v)
    F = model.features(m)
    return float(np.linalg.norm(v_gradient(model, s, Y, F, V, c.p[None], c.q[None])[0]))
