"""Problem definitions: coefficients, costs, their derivatives, and validators.

Population dependence goes through a finite feature vector ``F = E[psi(Y)]``
made of the mean and, optionally, the raw second moment ``E|y|^2``. A
derivative of a coefficient ``c`` along the population at a point y is then
``sum_k dc/dF_k * grad psi_k(y)``, so every measure derivative is exact.

Array conventions for N particles: ``Y (N, n)``, ``v (N, d)``, ``p (N, n)``,
``q (N, n, n)`` with ``q[:, :, j]`` the j-th column, features ``F (r,)``.
Diffusion columns are stored as ``sig0 (n, n)[:, j]``, ``sig1 (n, n, n)[j]``,
``sig2 (n, n, d)[j]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from math import factorial

import numpy as np

from .errors import (ModelEvaluationError, UnsupportedDimension,
                     UnsupportedMeasureDependence)
from .lq import LQModel
from .measure import ParticleMeasure, as_measure


@dataclass(frozen=True)
class AssumptionConstants:
    L: float = 1.0
    L_x: float = 0.0
    L_v: float = 0.0
    L_g: float = 0.0
    lambda_v: float = 0.5
    lambda_x: float = 0.0
    lambda_g: float = 0.0
    has_A3prime: bool = False

    def __post_init__(self):
        for name in ("L", "L_x", "L_v", "L_g", "lambda_x", "lambda_g"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not self.lambda_v > 0:
            raise ValueError("lambda_v must be positive")
        for name in ("L_x", "L_v", "L_g"):
            if getattr(self, name) > self.L:
                raise ValueError(f"{name} must not exceed L")


class MomentFeatures:
    """psi(y) = (y, |y|^2) or just y."""

    def __init__(self, n: int, second: bool):
        self.n = n
        self.second = bool(second)
        self.r = n + int(self.second)

    def __call__(self, Y: np.ndarray) -> np.ndarray:
        Y = np.asarray(Y, dtype=float).reshape(-1, self.n)
        out = Y.mean(axis=0)
        if self.second:
            out = np.append(out, np.mean(np.sum(Y * Y, axis=1)))
        return out

    def grad(self, Y: np.ndarray) -> np.ndarray:
        Y = np.asarray(Y, dtype=float).reshape(-1, self.n)
        out = np.zeros((Y.shape[0], self.r, self.n))
        out[:, np.arange(self.n), np.arange(self.n)] = 1.0
        if self.second:
            out[:, self.n, :] = 2.0 * Y
        return out

    def hess(self, Y: np.ndarray) -> np.ndarray:
        Y = np.asarray(Y, dtype=float).reshape(-1, self.n)
        out = np.zeros((Y.shape[0], self.r, self.n, self.n))
        if self.second:
            out[:, self.n] = 2.0 * np.eye(self.n)
        return out


class ModelSpec:
    """Base class for a game instance; subclasses supply the evaluators."""

    n: int = 1
    d: int = 1
    T: float = 1.0
    constants: AssumptionConstants = AssumptionConstants()
    phi: MomentFeatures
    name: str = "model"

    @property
    def r(self) -> int:
        return self.phi.r

    def features(self, m) -> np.ndarray:
        if isinstance(m, ParticleMeasure):
            return self.phi(m.points)
        m = np.asarray(m, dtype=float)
        if m.ndim == 1 and m.size == self.r and self.r != self.n:
            return m
        return self.phi(m)

    # dynamics
    def b0(self, s, F): raise NotImplementedError
    def b0_F(self, s, F): raise NotImplementedError
    def b1(self, s): raise NotImplementedError
    def b2(self, s): raise NotImplementedError
    def sig0(self, s, F): raise NotImplementedError
    def sig0_F(self, s, F): raise NotImplementedError
    def sig1(self, s): raise NotImplementedError
    def sig2(self, s): raise NotImplementedError

    # running cost
    def f(self, s, Y, F, v): raise NotImplementedError
    def fx(self, s, Y, F, v): raise NotImplementedError
    def fv(self, s, Y, F, v): raise NotImplementedError
    def fxx(self, s, Y, F, v): raise NotImplementedError
    def fxv(self, s, Y, F, v): raise NotImplementedError
    def fvv(self, s, Y, F, v): raise NotImplementedError
    def fF(self, s, Y, F, v): raise NotImplementedError
    def fxF(self, s, Y, F, v): raise NotImplementedError
    def fvF(self, s, Y, F, v): raise NotImplementedError

    # terminal cost
    def g(self, Y, F): raise NotImplementedError
    def gx(self, Y, F): raise NotImplementedError
    def gxx(self, Y, F): raise NotImplementedError
    def gF(self, Y, F): raise NotImplementedError
    def gxF(self, Y, F): raise NotImplementedError

    def third_derivatives(self, s, Y, F, v) -> dict:
        """1D third derivatives ``fxxx, fxxv, fxvv, fvvv`` as (N,) arrays."""
        raise UnsupportedDimension("third derivatives are available for n = d = 1 only")

    def gxxx(self, Y, F):
        raise UnsupportedDimension("third derivatives are available for n = d = 1 only")

    def closed_form_control(self, s, Y, F, p, q):
        """Exact minimiser when available, else None (Newton is used)."""
        return None

    @property
    def has_coupling(self) -> bool:
        return True

    def has_A4(self, samples: int = 5) -> bool:
        return all(np.all(self.sig2(s) == 0) for s in np.linspace(0.0, self.T, samples))

    def with_coupling_scale(self, lam: float) -> "ModelSpec":
        return ContinuationModel(self, lam)


# ---------------------------------------------------------------------------
# linear-quadratic family
# ---------------------------------------------------------------------------

class LQSpec(ModelSpec):
    """Evaluators for :class:`LQModel`; the population enters through its mean."""

    def __init__(self, lq: LQModel, constants: AssumptionConstants | None = None,
                 name: str = "lq"):
        self.lq = lq
        self.n, self.d, self.T = lq.n, lq.d, float(lq.T)
        self.phi = MomentFeatures(lq.n, second=False)
        self.name = name
        self.constants = constants or lq_constants(lq)

    def _N(self, Y):
        return np.asarray(Y).reshape(-1, self.n).shape[0]

    def b0(self, s, F):
        return self.lq.b0_at(s, F)

    def b0_F(self, s, F):
        return self.lq.B0m

    def b1(self, s):
        return self.lq.at("b1", s)

    def b2(self, s):
        return self.lq.at("b2", s)

    def sig0(self, s, F):
        return self.lq.sigma0_at(s, F)

    def sig0_F(self, s, F):
        return np.transpose(self.lq.S0m, (1, 0, 2))

    def sig1(self, s):
        return self.lq.at("sigma1", s)

    def sig2(self, s):
        return np.zeros((self.n, self.n, self.d))

    def f(self, s, Y, F, v):
        lq = self.lq
        Y = np.asarray(Y).reshape(-1, self.n)
        v = np.asarray(v).reshape(-1, self.d)
        return (lq.f0_at(s, F) + Y @ lq.f1_at(s, F) + v @ lq.f2_at(s, F)
                + 0.5 * np.einsum("ia,ab,ib->i", Y, lq.at("F1", s), Y)
                + 0.5 * np.einsum("ia,ab,ib->i", v, lq.at("F2", s), v))

    def fx(self, s, Y, F, v):
        Y = np.asarray(Y).reshape(-1, self.n)
        return self.lq.f1_at(s, F) + Y @ self.lq.at("F1", s).T

    def fv(self, s, Y, F, v):
        v = np.asarray(v).reshape(-1, self.d)
        return self.lq.f2_at(s, F) + v @ self.lq.at("F2", s).T

    def fxx(self, s, Y, F, v):
        return np.broadcast_to(self.lq.at("F1", s), (self._N(Y), self.n, self.n))

    def fxv(self, s, Y, F, v):
        return np.zeros((self._N(Y), self.n, self.d))

    def fvv(self, s, Y, F, v):
        return np.broadcast_to(self.lq.at("F2", s), (self._N(Y), self.d, self.d))

    def fF(self, s, Y, F, v):
        lq = self.lq
        Y = np.asarray(Y).reshape(-1, self.n)
        v = np.asarray(v).reshape(-1, self.d)
        return lq.f0m + 0.5 * (lq.F0m + lq.F0m.T) @ F + Y @ lq.F1m + v @ lq.F2m

    def fxF(self, s, Y, F, v):
        return np.broadcast_to(self.lq.F1m, (self._N(Y), self.n, self.n))

    def fvF(self, s, Y, F, v):
        return np.broadcast_to(self.lq.F2m, (self._N(Y), self.d, self.n))

    def g(self, Y, F):
        lq = self.lq
        Y = np.asarray(Y).reshape(-1, self.n)
        return lq.g0_at(F) + Y @ lq.g1_at(F) + 0.5 * np.einsum("ia,ab,ib->i", Y, lq.G, Y)

    def gx(self, Y, F):
        Y = np.asarray(Y).reshape(-1, self.n)
        return self.lq.g1_at(F) + Y @ self.lq.G.T

    def gxx(self, Y, F):
        return np.broadcast_to(self.lq.G, (self._N(Y), self.n, self.n))

    def gF(self, Y, F):
        lq = self.lq
        Y = np.asarray(Y).reshape(-1, self.n)
        return lq.g0m + 0.5 * (lq.G0m + lq.G0m.T) @ F + Y @ lq.G1m

    def gxF(self, Y, F):
        return np.broadcast_to(self.lq.G1m, (self._N(Y), self.n, self.n))

    def third_derivatives(self, s, Y, F, v):
        if self.n != 1 or self.d != 1:
            return super().third_derivatives(s, Y, F, v)
        z = np.zeros(self._N(Y))
        return {"fxxx": z, "fxxv": z, "fxvv": z, "fvvv": z}

    def gxxx(self, Y, F):
        if self.n != 1:
            return super().gxxx(Y, F)
        return np.zeros(self._N(Y))

    def closed_form_control(self, s, Y, F, p, q):
        lq = self.lq
        rhs = np.asarray(p).reshape(-1, self.n) @ lq.at("b2", s) + lq.f2_at(s, F)
        return -rhs @ np.linalg.inv(lq.at("F2", s)).T

    @property
    def has_coupling(self) -> bool:
        return self.lq.mean_coupled

    def has_A4(self, samples: int = 5) -> bool:
        return True


def lq_constants(lq: LQModel, s: float = 0.0) -> AssumptionConstants:
    """Sharp convexity constants and coupling Lipschitz constants of LQ data."""
    lam = lambda M: float(np.min(np.linalg.eigvalsh(0.5 * (M + M.T))))
    nrm = lambda M: float(np.linalg.norm(M, 2)) if np.size(M) else 0.0
    L_x, L_v, L_g = nrm(lq.F1m), nrm(lq.F2m), nrm(lq.G1m)
    big = [nrm(lq.at(k, s)) for k in ("b1", "b2", "F1", "F2")] + [nrm(lq.G), 1.0]
    big += [nrm(lq.B0m), nrm(lq.S0m.reshape(lq.n, -1)), L_x, L_v, L_g]
    return AssumptionConstants(
        L=max(big), L_x=L_x, L_v=L_v, L_g=L_g,
        lambda_v=max(0.5 * lam(lq.at("F2", s)), 1e-12),
        lambda_x=max(0.5 * lam(lq.at("F1", s)), 0.0),
        lambda_g=max(0.5 * lam(lq.G), 0.0),
        has_A3prime=not (np.any(lq.B0m) or np.any(lq.S0m)),
    )


# ---------------------------------------------------------------------------
# scalar polynomial family with moment coupling
# ---------------------------------------------------------------------------

def _falling(a: np.ndarray, k: int) -> np.ndarray:
    out = np.ones_like(a, dtype=float)
    for i in range(k):
        out = out * (a - i)
    return out


def _poly(terms: np.ndarray, x, v, M1, M2, dx=0, dv=0, dM1=0, dM2=0):
    """Derivative of sum coef * x^a v^b M1^c M2^e; ``terms`` rows are (coef, a, b, c, e)."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    out = np.zeros(np.broadcast(x, v).shape)
    for coef, a, b, c, e in terms:
        orders = ((a, dx), (b, dv), (c, dM1), (e, dM2))
        if any(k > p for p, k in orders):
            continue
        k = coef * _falling(np.array(a), dx) * _falling(np.array(b), dv)
        k = k * _falling(np.array(c), dM1) * _falling(np.array(e), dM2)
        out = out + k * x ** (a - dx) * v ** (b - dv) * M1 ** (c - dM1) * M2 ** (e - dM2)
    return out


def _terms(rows, width: int) -> np.ndarray:
    """Pad short monomial rows to (coef, a, b, c, e)."""
    arr = np.zeros((len(rows), 5))
    layout = {5: [0, 1, 2, 3, 4], 4: [0, 1, 3, 4], 3: [0, 3, 4]}[width]
    for i, row in enumerate(rows):
        row = list(row)
        if len(row) != width:
            raise ValueError(f"expected {width} entries per monomial, got {row}")
        arr[i, layout] = row
    for col in range(1, 5):
        if np.any(arr[:, col] < 0) or np.any(arr[:, col] != np.round(arr[:, col])):
            raise ValueError("monomial exponents must be nonnegative integers")
    return arr


class MomentCoupledModel(ModelSpec):
    """Scalar (n = d = 1) game whose data are polynomials in x, v and the moments.

    ``b = b0(M1, M2) + b1 x + b2 v`` and ``sigma = sig0(M1, M2) + sig1 x + sig2 v``.
    ``f`` rows are ``(coef, a, b, c, e)`` for ``coef * x^a v^b M1^c M2^e``;
    ``g`` rows are ``(coef, a, c, e)``; ``b0``/``sig0`` rows are ``(coef, c, e)``.
    """

    def __init__(self, f_terms, g_terms, b0_terms=(), sig0_terms=(), b1=0.0, b2=1.0,
                 sig1=0.0, sig2=0.0, T=1.0, constants=None, name="moment_coupled"):
        self.n = self.d = 1
        self.T = float(T)
        self.name = name
        self.ft = _terms(f_terms, 5)
        self.gt = _terms(g_terms, 4)
        self.b0t = _terms(b0_terms, 3)
        self.s0t = _terms(sig0_terms, 3)
        self._b1, self._b2, self._s1, self._s2 = map(float, (b1, b2, sig1, sig2))
        self.phi = MomentFeatures(1, second=True)
        self.constants = constants or AssumptionConstants()

    @property
    def has_coupling(self) -> bool:
        return any(np.any(t[:, 3:] != 0) for t in (self.ft, self.gt, self.b0t, self.s0t))

    @staticmethod
    def _xv(Y, v):
        return np.asarray(Y, dtype=float).reshape(-1), np.asarray(v, dtype=float).reshape(-1)

    def b0(self, s, F):
        return np.atleast_1d(_poly(self.b0t, 0.0, 0.0, F[0], F[1]))

    def b0_F(self, s, F):
        return np.array([[_poly(self.b0t, 0.0, 0.0, F[0], F[1], dM1=1),
                          _poly(self.b0t, 0.0, 0.0, F[0], F[1], dM2=1)]])

    def b1(self, s):
        return np.array([[self._b1]])

    def b2(self, s):
        return np.array([[self._b2]])

    def sig0(self, s, F):
        return np.array([[_poly(self.s0t, 0.0, 0.0, F[0], F[1])]])

    def sig0_F(self, s, F):
        return np.array([[[_poly(self.s0t, 0.0, 0.0, F[0], F[1], dM1=1),
                           _poly(self.s0t, 0.0, 0.0, F[0], F[1], dM2=1)]]])

    def sig1(self, s):
        return np.array([[[self._s1]]])

    def sig2(self, s):
        return np.array([[[self._s2]]])

    def _fd(self, Y, F, v, **orders):
        x, vv = self._xv(Y, v)
        return _poly(self.ft, x, vv, F[0], F[1], **orders)

    def f(self, s, Y, F, v):
        return self._fd(Y, F, v)

    def fx(self, s, Y, F, v):
        return self._fd(Y, F, v, dx=1)[:, None]

    def fv(self, s, Y, F, v):
        return self._fd(Y, F, v, dv=1)[:, None]

    def fxx(self, s, Y, F, v):
        return self._fd(Y, F, v, dx=2)[:, None, None]

    def fxv(self, s, Y, F, v):
        return self._fd(Y, F, v, dx=1, dv=1)[:, None, None]

    def fvv(self, s, Y, F, v):
        return self._fd(Y, F, v, dv=2)[:, None, None]

    def fF(self, s, Y, F, v):
        return np.stack([self._fd(Y, F, v, dM1=1), self._fd(Y, F, v, dM2=1)], axis=-1)

    def fxF(self, s, Y, F, v):
        return np.stack([self._fd(Y, F, v, dx=1, dM1=1),
                         self._fd(Y, F, v, dx=1, dM2=1)], axis=-1)[:, None, :]

    def fvF(self, s, Y, F, v):
        return np.stack([self._fd(Y, F, v, dv=1, dM1=1),
                         self._fd(Y, F, v, dv=1, dM2=1)], axis=-1)[:, None, :]

    def _gd(self, Y, F, **orders):
        x = np.asarray(Y, dtype=float).reshape(-1)
        return _poly(self.gt, x, 0.0, F[0], F[1], **orders)

    def g(self, Y, F):
        return self._gd(Y, F)

    def gx(self, Y, F):
        return self._gd(Y, F, dx=1)[:, None]

    def gxx(self, Y, F):
        return self._gd(Y, F, dx=2)[:, None, None]

    def gF(self, Y, F):
        return np.stack([self._gd(Y, F, dM1=1), self._gd(Y, F, dM2=1)], axis=-1)

    def gxF(self, Y, F):
        return np.stack([self._gd(Y, F, dx=1, dM1=1), self._gd(Y, F, dx=1, dM2=1)],
                        axis=-1)[:, None, :]

    def third_derivatives(self, s, Y, F, v):
        return {"fxxx": self._fd(Y, F, v, dx=3), "fxxv": self._fd(Y, F, v, dx=2, dv=1),
                "fxvv": self._fd(Y, F, v, dx=1, dv=2), "fvvv": self._fd(Y, F, v, dv=3)}

    def gxxx(self, Y, F):
        return self._gd(Y, F, dx=3)


# ---------------------------------------------------------------------------
# homotopy in the coupling strength
# ---------------------------------------------------------------------------

class ContinuationModel(ModelSpec):
    """Evaluates ``base`` at scaled features ``lam * F``.

    ``lam = 0`` removes every population effect; ``lam = 1`` is the target.
    """

    _PLAIN = ("b1", "b2", "sig1", "sig2")

    def __init__(self, base: ModelSpec, lam: float):
        self.base = base
        self.lam = float(lam)
        self.n, self.d, self.T = base.n, base.d, base.T
        self.phi = base.phi
        self.constants = base.constants
        self.name = f"{base.name}@{self.lam:g}"

    def __getattribute__(self, item):
        if item in ContinuationModel._PLAIN:
            return getattr(object.__getattribute__(self, "base"), item)
        return object.__getattribute__(self, item)

    def b0(self, s, F): return self.base.b0(s, self.lam * F)
    def b0_F(self, s, F): return self.lam * self.base.b0_F(s, self.lam * F)
    def sig0(self, s, F): return self.base.sig0(s, self.lam * F)
    def sig0_F(self, s, F): return self.lam * self.base.sig0_F(s, self.lam * F)
    def f(self, s, Y, F, v): return self.base.f(s, Y, self.lam * F, v)
    def fx(self, s, Y, F, v): return self.base.fx(s, Y, self.lam * F, v)
    def fv(self, s, Y, F, v): return self.base.fv(s, Y, self.lam * F, v)
    def fxx(self, s, Y, F, v): return self.base.fxx(s, Y, self.lam * F, v)
    def fxv(self, s, Y, F, v): return self.base.fxv(s, Y, self.lam * F, v)
    def fvv(self, s, Y, F, v): return self.base.fvv(s, Y, self.lam * F, v)
    def fF(self, s, Y, F, v): return self.lam * self.base.fF(s, Y, self.lam * F, v)
    def fxF(self, s, Y, F, v): return self.lam * self.base.fxF(s, Y, self.lam * F, v)
    def fvF(self, s, Y, F, v): return self.lam * self.base.fvF(s, Y, self.lam * F, v)
    def g(self, Y, F): return self.base.g(Y, self.lam * F)
    def gx(self, Y, F): return self.base.gx(Y, self.lam * F)
    def gxx(self, Y, F): return self.base.gxx(Y, self.lam * F)
    def gF(self, Y, F): return self.lam * self.base.gF(Y, self.lam * F)
    def gxF(self, Y, F): return self.lam * self.base.gxF(Y, self.lam * F)

    def third_derivatives(self, s, Y, F, v):
        return self.base.third_derivatives(s, Y, self.lam * F, v)

    def gxxx(self, Y, F):
        return self.base.gxxx(Y, self.lam * F)

    def closed_form_control(self, s, Y, F, p, q):
        return self.base.closed_form_control(s, Y, self.lam * F, p, q)

    @property
    def has_coupling(self) -> bool:
        return self.base.has_coupling and self.lam != 0

    def has_A4(self, samples: int = 5) -> bool:
        return self.base.has_A4(samples)


# ---------------------------------------------------------------------------
# validators
# ---------------------------------------------------------------------------

@dataclass
class CheckReport:
    passes: bool
    worst_margin: float
    witness: dict | None = None
    details: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"passes": bool(self.passes), "worst_margin": float(self.worst_margin),
                "witness": _jsonable(self.witness), "details": _jsonable(self.details)}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _guard(fn, name, point):
    try:
        out = fn()
    except (FloatingPointError, ValueError, ZeroDivisionError) as exc:
        raise ModelEvaluationError(f"{name} failed: {exc}", point) from exc
    out = np.asarray(out, dtype=float)
    if not np.all(np.isfinite(out)):
        raise ModelEvaluationError(f"{name} returned non-finite values", point)
    return out


def _min_eig_dir(H: np.ndarray) -> np.ndarray:
    w, U = np.linalg.eigh(0.5 * (H + np.swapaxes(H, -1, -2)))
    return U[..., :, 0]


def check_convexity(model: ModelSpec, rng: np.random.Generator, sample_count: int = 1000,
                    box: float = 3.0, cloud_size: int = 16, tol: float = 1e-10) -> CheckReport:
    """Strong-convexity checks on random samples from ``[-box, box]``.

    Every margin is the inequality slack divided by the squared step, so a
    quadratic model reports its exact gap ``lambda_true - lambda_declared``.
    Half of the probes step along the least-convex Hessian direction, which
    pins the gap for matrix-valued quadratics.
    """
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    c = model.constants
    n, d = model.n, model.d
    worst = {"v": (np.inf, None), "joint": (np.inf, None), "g": (np.inf, None)}

    def record(kind, margins, pts):
        i = int(np.argmin(margins))
        if margins[i] < worst[kind][0]:
            worst[kind] = (float(margins[i]), {k: np.asarray(val[i]) for k, val in pts.items()})

    S = sample_count
    s = rng.uniform(0.0, model.T, S)
    x = rng.uniform(-box, box, (S, n))
    xp = rng.uniform(-box, box, (S, n))
    v = rng.uniform(-box, box, (S, d))
    vp = rng.uniform(-box, box, (S, d))
    clouds = rng.uniform(-box, box, (S, cloud_size, n))
    guided = np.arange(S) % 2 == 1
    for i in range(S):
        F = model.features(clouds[i])
        pt = {"s": s[i], "x": x[i], "v": v[i], "F": F}
        f0 = _guard(lambda: model.f(s[i], x[i][None], F, v[i][None]), "f", pt)[0]
        fv0 = _guard(lambda: model.fv(s[i], x[i][None], F, v[i][None]), "fv", pt)[0]
        fx0 = _guard(lambda: model.fx(s[i], x[i][None], F, v[i][None]), "fx", pt)[0]
        dv = vp[i] - v[i]
        if guided[i]:
            H = _guard(lambda: model.fvv(s[i], x[i][None], F, v[i][None]), "fvv", pt)[0]
            dv = _min_eig_dir(H) * np.linalg.norm(dv)
        nv = dv @ dv
        if nv > 1e-8:
            f1 = _guard(lambda: model.f(s[i], x[i][None], F, (v[i] + dv)[None]), "f", pt)[0]
            m = (f1 - f0 - fv0 @ dv) / nv - c.lambda_v
            record("v", np.array([m]), {**{k: [val] for k, val in pt.items()},
                                        "v_prime": [v[i] + dv]})
        if c.has_A3prime:
            dx, dvj = xp[i] - x[i], vp[i] - v[i]
            if guided[i]:
                Hxx = model.fxx(s[i], x[i][None], F, v[i][None])[0]
                Hxv = model.fxv(s[i], x[i][None], F, v[i][None])[0]
                Hvv = model.fvv(s[i], x[i][None], F, v[i][None])[0]
                H = np.block([[Hxx, Hxv], [Hxv.T, Hvv]])
                H = H - 2 * np.diag(np.r_[np.full(n, c.lambda_x), np.full(d, c.lambda_v)])
                u = _min_eig_dir(H) * np.sqrt(dx @ dx + dvj @ dvj)
                dx, dvj = u[:n], u[n:]
            nrm = dx @ dx + dvj @ dvj
            if nrm > 1e-8:
                f1 = _guard(lambda: model.f(s[i], (x[i] + dx)[None], F, (v[i] + dvj)[None]),
                            "f", pt)[0]
                slack = (f1 - f0 - fx0 @ dx - fv0 @ dvj
                         - c.lambda_x * (dx @ dx) - c.lambda_v * (dvj @ dvj))
                record("joint", np.array([slack / nrm]),
                       {**{k: [val] for k, val in pt.items()},
                        "x_prime": [x[i] + dx], "v_prime": [v[i] + dvj]})
            dx = xp[i] - x[i]
            if guided[i]:
                Hg = _guard(lambda: model.gxx(x[i][None], F), "gxx", pt)[0]
                dx = _min_eig_dir(Hg) * np.linalg.norm(dx)
            nx = dx @ dx
            if nx > 1e-8:
                g0 = _guard(lambda: model.g(x[i][None], F), "g", pt)[0]
                g1 = _guard(lambda: model.g((x[i] + dx)[None], F), "g", pt)[0]
                gx0 = model.gx(x[i][None], F)[0]
                record("g", np.array([(g1 - g0 - gx0 @ dx) / nx - c.lambda_g]),
                       {"x": [x[i]], "x_prime": [x[i] + dx], "F": [F]})
    margins = {k: val[0] for k, val in worst.items() if np.isfinite(val[0])}
    kind = min(margins, key=margins.get) if margins else "v"
    worst_margin = margins.get(kind, 0.0)
    passes = all(m >= -tol for m in margins.values())
    witness = None if passes else {"inequality": kind, **worst[kind][1]}
    return CheckReport(passes, worst_margin, witness, {"margins": margins})


def check_small_mf_effect(constants: AssumptionConstants) -> bool:
    c = constants
    return bool(c.lambda_x >= c.L_v ** 2 / (8 * c.lambda_v) + c.L_x / 2
                and c.lambda_g >= c.L_g / 2)


def monotonicity_alpha(constants: AssumptionConstants, n: int) -> float:
    """Explicit alpha obtained by Young's inequality with weight lambda_v / L.

    With A3' in force the cross terms are absorbed and alpha = 0.
    """
    c = constants
    if c.has_A3prime:
        return 0.0
    return max(2.5 * c.L ** 2 / c.lambda_v + 2.5 * c.L, 0.5 * (1 + n) * c.L)


def check_monotonicity(model: ModelSpec, rng: np.random.Generator, sample_count: int = 200,
                       box: float = 3.0, cloud_size: int = 16, tol: float = 1e-9) -> CheckReport:
    """Monte Carlo check of the monotonicity inequality for the maximum-principle system.

    For paired clouds (X, p, q) and (X', p', q') it evaluates
    ``E[(F'-F).dX + (B'-B).dp + sum_j (A'^j-A^j).dq^j]`` with ``B = D_pH``,
    ``A = D_qH``, ``F = -D_xH`` and compares it with
    ``E[-lambda_v |dv|^2 + alpha (|dX|^2 + |dp|^2 + |dq|^2)]``.
    Under A3' the terminal map ``D_xg`` must also be monotone.
    """
    from .hamiltonian import control_map, diffusion, drift, dx_hamiltonian

    c = model.constants
    n = model.n
    alpha = monotonicity_alpha(c, n)
    worst_i, worst_iii = np.inf, np.inf
    wit_i = wit_iii = None
    for _ in range(sample_count):
        s = rng.uniform(0.0, model.T)
        X, Xp = rng.uniform(-box, box, (2, cloud_size, n))
        p, pp = rng.uniform(-box, box, (2, cloud_size, n))
        q, qp = rng.uniform(-box, box, (2, cloud_size, n, n))
        F, Fp = model.features(X), model.features(Xp)
        v = control_map(model, s, X, F, p, q)
        vp = control_map(model, s, Xp, Fp, pp, qp)
        dF = dx_hamiltonian(model, s, X, F, v, p, q) - dx_hamiltonian(model, s, Xp, Fp, vp, pp, qp)
        lhs = np.mean(np.sum(dF * (Xp - X), axis=1)
                      + np.sum((drift(model, s, Xp, Fp, vp) - drift(model, s, X, F, v)) * (pp - p), axis=1)
                      + np.sum((diffusion(model, s, Xp, Fp, vp) - diffusion(model, s, X, F, v)) * (qp - q),
                               axis=(1, 2)))
        rhs = np.mean(-c.lambda_v * np.sum((vp - v) ** 2, axis=1)
                      + alpha * (np.sum((Xp - X) ** 2, axis=1) + np.sum((pp - p) ** 2, axis=1)
                                 + np.sum((qp - q) ** 2, axis=(1, 2))))
        margin = rhs - lhs
        if margin < worst_i:
            worst_i, wit_i = float(margin), {"s": s, "X": X, "X_prime": Xp}
        if c.has_A3prime:
            m3 = np.mean(np.sum((model.gx(Xp, Fp) - model.gx(X, F)) * (Xp - X), axis=1))
            if m3 < worst_iii:
                worst_iii, wit_iii = float(m3), {"X": X, "X_prime": Xp}
    ok_i = worst_i >= -tol
    ok_iii = (not c.has_A3prime) or worst_iii >= -tol
    details = {"alpha": alpha, "condition_i_margin": worst_i}
    if c.has_A3prime:
        details["condition_iii_margin"] = worst_iii
    worst = min(worst_i, worst_iii)
    witness = None
    if not ok_i:
        witness = {"condition": "i", **wit_i}
    elif not ok_iii:
        witness = {"condition": "iii", **wit_iii}
    return CheckReport(ok_i and ok_iii, worst, witness, details)


def check_derivative_consistency(model: ModelSpec, rng: np.random.Generator,
                                 sample_count: int = 20, h: float = 1e-4, tol: float = 1e-6,
                                 box: float = 3.0, cloud_size: int = 16) -> CheckReport:
    """Compare every derivative evaluator with a central difference of its parent.

    Population derivatives are probed by moving one atom of a random cloud:
    ``N d/de c(F(cloud + e e_i)) = dc/dF . grad psi(y_i)``.
    Errors are measured as ``|analytic - fd| / (1 + |analytic|)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    n, d = model.n, model.d
    errs: dict[str, float] = {}

    def put(name, a, b):
        a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
        e = float(np.max(np.abs(a - b) / (1.0 + np.abs(a)))) if a.size else 0.0
        errs[name] = max(errs.get(name, 0.0), e)

    def cdiff(fun, z, k):
        e = np.zeros_like(z)
        e[..., k] = h
        return (fun(z + e) - fun(z - e)) / (2 * h)

    for _ in range(sample_count):
        s = rng.uniform(0.0, model.T)
        x = rng.uniform(-box, box, (1, n))
        v = rng.uniform(-box, box, (1, d))
        cloud = rng.uniform(-box, box, (cloud_size, n))
        F = model.features(cloud)
        for k in range(n):
            put("fx", model.fx(s, x, F, v)[:, k], cdiff(lambda z: model.f(s, z, F, v), x, k))
            put("fxx", model.fxx(s, x, F, v)[:, :, k], cdiff(lambda z: model.fx(s, z, F, v), x, k))
            put("gx", model.gx(x, F)[:, k], cdiff(lambda z: model.g(z, F), x, k))
            put("gxx", model.gxx(x, F)[:, :, k], cdiff(lambda z: model.gx(z, F), x, k))
        for k in range(d):
            put("fv", model.fv(s, x, F, v)[:, k], cdiff(lambda z: model.f(s, x, F, z), v, k))
            put("fvv", model.fvv(s, x, F, v)[:, :, k], cdiff(lambda z: model.fv(s, x, F, z), v, k))
            put("fxv", model.fxv(s, x, F, v)[:, :, k], cdiff(lambda z: model.fx(s, x, F, z), v, k))
        if n == 1 and d == 1:
            try:
                t3 = model.third_derivatives(s, x, F, v)
                put("fxxx", t3["fxxx"], cdiff(lambda z: model.fxx(s, z, F, v)[:, 0, 0], x, 0))
                put("fxxv", t3["fxxv"], cdiff(lambda z: model.fxx(s, x, F, z)[:, 0, 0], v, 0))
                put("fxvv", t3["fxvv"], cdiff(lambda z: model.fvv(s, z, F, v)[:, 0, 0], x, 0))
                put("fvvv", t3["fvvv"], cdiff(lambda z: model.fvv(s, x, F, z)[:, 0, 0], v, 0))
                put("gxxx", model.gxxx(x, F), cdiff(lambda z: model.gxx(z, F)[:, 0, 0], x, 0))
            except UnsupportedDimension:
                pass
        # population directions: move atom i along coordinate k
        i = int(rng.integers(cloud_size))
        grad = model.phi.grad(cloud[i:i + 1])[0]  # (r, n)
        N = cloud_size
        for k in range(n):
            def moved(z):
                c2 = cloud.copy()
                c2[i] = z[0]
                return model.phi(c2)
            y = cloud[i:i + 1].copy()
            lift = lambda fun: cdiff(lambda z: fun(moved(z)), y, k) * N
            gk = grad[:, k]
            put("b0_F", model.b0_F(s, F) @ gk, lift(lambda G: model.b0(s, G)))
            put("sig0_F", model.sig0_F(s, F) @ gk, lift(lambda G: model.sig0(s, G)))
            put("fF", model.fF(s, x, F, v) @ gk, lift(lambda G: model.f(s, x, G, v)))
            put("fxF", model.fxF(s, x, F, v) @ gk, lift(lambda G: model.fx(s, x, G, v)))
            put("fvF", model.fvF(s, x, F, v) @ gk, lift(lambda G: model.fv(s, x, G, v)))
            put("gF", model.gF(x, F) @ gk, lift(lambda G: model.g(x, G)))
            put("gxF", model.gxF(x, F) @ gk, lift(lambda G: model.gx(x, G)))
    bad = sorted(k for k, e in errs.items() if e > tol)
    worst = max(errs.values()) if errs else 0.0
    return CheckReport(not bad, -worst, {"mismatched": bad} if bad else None, {"errors": errs})


# ---------------------------------------------------------------------------
# construction from configuration documents
# ---------------------------------------------------------------------------

def _constants_from(block: dict | None, default: AssumptionConstants) -> AssumptionConstants:
    if not block:
        return default
    known = {f for f in AssumptionConstants.__dataclass_fields__}
    unknown = set(block) - known
    if unknown:
        from .errors import ConfigError
        raise ConfigError(f"model.constants.{sorted(unknown)[0]}", "unknown constant")
    return replace(default, **block)


def model_from_config(cfg: dict) -> ModelSpec:
    """Build a model from the ``model`` block of a run configuration."""
    from .errors import ConfigError

    if not isinstance(cfg, dict):
        raise ConfigError("model", "must be a mapping")
    kind = cfg.get("kind")
    if kind == "lq":
        n, d = int(cfg.get("n", 1)), int(cfg.get("d", 1))
        allowed = {"kind", "n", "d", "T", "constants", "name", "coupling"} | {
            "b0", "b1", "b2", "sigma0", "sigma1", "F1", "F2", "G", "f0", "f1", "f2", "g0", "g1"}
        for key in cfg:
            if key not in allowed:
                raise ConfigError(f"model.{key}", "unknown field for kind lq")
        kw = {k: cfg[k] for k in cfg if k not in ("kind", "n", "d", "constants", "name", "coupling")}
        coupling = cfg.get("coupling") or {}
        for key in coupling:
            if key not in ("B0m", "S0m", "f0m", "F0m", "F1m", "F2m", "g0m", "G0m", "G1m"):
                raise ConfigError(f"model.coupling.{key}", "unknown coupling field")
        kw.update(coupling)
        try:
            lq = LQModel(n=n, d=d, **kw)
        except (ValueError, TypeError) as exc:
            raise ConfigError("model", f"bad LQ data: {exc}") from exc
        base = lq_constants(lq)
        return LQSpec(lq, _constants_from(cfg.get("constants"), base), cfg.get("name", "lq"))
    if kind == "moment_coupled":
        allowed = {"kind", "T", "f", "g", "b0", "sigma0", "b1", "b2", "sigma1", "sigma2",
                   "constants", "name", "n", "d"}
        for key in cfg:
            if key not in allowed:
                raise ConfigError(f"model.{key}", "unknown field for kind moment_coupled")
        if int(cfg.get("n", 1)) != 1 or int(cfg.get("d", 1)) != 1:
            raise ConfigError("model.n", "moment_coupled models are scalar (n = d = 1)")
        for key in ("f", "g"):
            if key not in cfg:
                raise ConfigError(f"model.{key}", "required for kind moment_coupled")
        try:
            return MomentCoupledModel(
                cfg["f"], cfg["g"], cfg.get("b0", ()), cfg.get("sigma0", ()),
                b1=cfg.get("b1", 0.0), b2=cfg.get("b2", 1.0), sig1=cfg.get("sigma1", 0.0),
                sig2=cfg.get("sigma2", 0.0), T=cfg.get("T", 1.0),
                constants=_constants_from(cfg.get("constants"), AssumptionConstants()),
                name=cfg.get("name", "moment_coupled"))
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError("model", f"bad moment_coupled data: {exc}") from exc
    raise ConfigError("model.kind", f"expected 'lq' or 'moment_coupled', got {kind!r}")
