"""Linearised forward-backward flows along a converged base solution.

Every derivative process (Jacobian in x, directional derivative in the
initial law, its population part, the measure-derivative kernels and the 1D
second-order flow) solves the same linear system with frozen coefficients:

    dY' = [B0F dF + b1 Y' + b2 v'] ds + sum_j [S0F^j dF + sig1^j Y' + sig2^j v'] dB^j
    dp' = -[b1^T p' + sum_j sig1^jT q'^j + fxx Y' + fxv v' + fxF dF + r] ds + q' dB
    p'_T = gxx Y'_T + gxF dF_T + r_T
    v'  = Jx Y' + Jp p' + sum_j Jq^j q'^j + JF dF + r_v

where ``dF`` is the feature perturbation, made of an exogenous part and,
for mean-field flows, ``mean_i grad psi(Y_i) Y'_i`` over the flow's own cloud.
The solver is a Picard iteration whose backward step writes
``p'_{k+1} = A_{k+1} Y'_{k+1} + R_{k+1}`` with ``A`` the slope of the base
costate feedback, so only the small remainder R is regressed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, PicardDivergence, UnsupportedDimension
from .fbsde import FbsdeSolution, MeasureFlow, write_path_csv
from .hamiltonian import control_sensitivities

PICARD_TOL = 1e-11
PICARD_MAX = 400


@dataclass
class LinearFlow:
    """Solution of one linear system with ``c`` stacked right-hand sides.

    Shapes: ``Y, p (K+1, N, n, c)``, ``q (K+1, N, n, n, c)`` (axis 3 is the
    Brownian column), ``v (K+1, N, d, c)`` and the total feature perturbation
    ``dF (K+1, r, c)``.
    """

    grid: object
    Y: np.ndarray
    p: np.ndarray
    q: np.ndarray
    v: np.ndarray
    dF: np.ndarray
    kind: str
    sweeps: int = 0

    @property
    def columns(self) -> int:
        return self.Y.shape[-1]

    def column(self, j: int) -> "LinearFlow":
        sl = (Ellipsis, slice(j, j + 1))
        return LinearFlow(self.grid, self.Y[sl], self.p[sl], self.q[sl], self.v[sl],
                          self.dF[sl], self.kind, self.sweeps)

    def __add__(self, other: "LinearFlow") -> "LinearFlow":
        return LinearFlow(self.grid, self.Y + other.Y, self.p + other.p, self.q + other.q,
                          self.v + other.v, self.dF + other.dF, self.kind, self.sweeps)

    def scaled(self, a: float) -> "LinearFlow":
        return LinearFlow(self.grid, a * self.Y, a * self.p, a * self.q, a * self.v,
                          a * self.dF, self.kind, self.sweeps)

    def sup_norm(self) -> float:
        return float(max(np.abs(self.Y).max(), np.abs(self.p).max()))

    def to_csv(self, path) -> None:
        """Same columns as a base solution plus ``flow_kind`` and ``column``."""
        n, d = self.Y.shape[2], self.v.shape[2]
        head = (["column", "node", "particle"] + [f"Y{a}" for a in range(n)]
                + [f"p{a}" for a in range(n)] + [f"q{a}{j}" for a in range(n) for j in range(n)]
                + [f"v{e}" for e in range(d)])
        blocks = [([self.kind, col], self.Y[..., col], self.p[..., col], self.q[..., col], self.v[..., col])
                  for col in range(self.columns)]
        write_path_csv(path, head, blocks, self.kind)


@dataclass
class KernelFlow:
    """Measure-derivative kernels at probe points ``z (P, n)``.

    ``xi`` is the equilibrium kernel (columns ordered probe-major, then the
    derivative direction), ``mu`` the kernel of the player started at x.
    ``xi_zz``/``mu_zz`` hold the second z-derivatives (1D only).
    """

    z: np.ndarray
    xi: LinearFlow
    mu: LinearFlow | None = None
    xi_zz: LinearFlow | None = None
    mu_zz: LinearFlow | None = None
    extras: dict = field(default_factory=dict, repr=False)


class _Frozen:
    """Base-path coefficients reused by every linear solve."""

    def __init__(self, model, base: FbsdeSolution):
        if "bases" not in base.feedback:
            raise ValueError("base solution lacks its regression bases")
        self.model, self.base = model, base
        g = base.grid
        self.K, self.dt = g.K, g.dt
        self.N, self.n, self.d, self.r = base.N, model.n, model.d, model.r
        s = g.nodes
        Y, F, v = base.Y, base.F, base.v
        self.sens = [control_sensitivities(model, s[k], Y[k], F[k], v[k]) for k in range(self.K + 1)]
        self.b1 = [model.b1(sk) for sk in s]
        self.b2 = [model.b2(sk) for sk in s]
        self.sig1 = [model.sig1(sk) for sk in s]
        self.sig2 = [model.sig2(sk) for sk in s]
        self.B0F = [np.asarray(model.b0_F(s[k], F[k]), dtype=float) for k in range(self.K + 1)]
        self.S0F = [np.asarray(model.sig0_F(s[k], F[k]), dtype=float) for k in range(self.K + 1)]
        self.fxx = [model.fxx(s[k], Y[k], F[k], v[k]) for k in range(self.K + 1)]
        self.fxv = [model.fxv(s[k], Y[k], F[k], v[k]) for k in range(self.K + 1)]
        self.fxF = [model.fxF(s[k], Y[k], F[k], v[k]) for k in range(self.K + 1)]
        self.gxx = np.asarray(model.gxx(Y[-1], F[-1]), dtype=float)
        self.gxF = np.asarray(model.gxF(Y[-1], F[-1]), dtype=float)
        self.psi_grad = [model.phi.grad(Y[k]) for k in range(self.K + 1)]
        self.bases = base.feedback["bases"]
        self.A = [base.costate_slope(k) for k in range(self.K + 1)]
        self.alpha, self.beta = [], []
        for k in range(self.K):
            Abar, _, b = self.bases[k].project_joint(self.A[k + 1])
            phi = self.bases[k].phi
            self.alpha.append(Abar)
            # E_k[A_{k+1} dB^j] = phi b_j sqrt(dt)
            self.beta.append(np.einsum("im,jmab->jiab", phi, b) * np.sqrt(self.dt))

    @classmethod
    def of(cls, model, base: FbsdeSolution) -> "_Frozen":
        cached = base.feedback.get("_frozen")
        if cached is None or cached.model is not model:
            cached = cls(model, base)
            base.feedback["_frozen"] = cached
        return cached

    def control(self, k, dY, dp, dq, dF, src=None):
        S = self.sens[k]
        out = (np.einsum("idn,inc->idc", S["Jx"], dY) + np.einsum("idn,inc->idc", S["Jp"], dp)
               + np.einsum("idaj,iajc->idc", S["Jq"], dq) + np.einsum("idr,rc->idc", S["JF"], dF))
        return out if src is None else out + src

    def solve(self, init, exo=None, endogenous=False, src_v=None, src_drive=None,
              src_term=None, kind="linear", tol=PICARD_TOL, max_iter=PICARD_MAX) -> LinearFlow:
        K, N, n, d, r, dt = self.K, self.N, self.n, self.d, self.r, self.dt
        init = np.asarray(init, dtype=float)
        c = init.shape[-1]
        if init.shape != (N, n, c):
            raise DimensionError(f"initial perturbation must be ({N}, {n}, c), got {init.shape}")
        exo = np.zeros((K + 1, r, c)) if exo is None else np.asarray(exo, dtype=float)
        dB = self.base.dB
        sqdt = np.sqrt(dt)

        Yp = np.zeros((K + 1, N, n, c))
        pp = np.zeros((K + 1, N, n, c))
        qp = np.zeros((K + 1, N, n, n, c))
        trace = []
        for sweep in range(1, max_iter + 1):
            Y = np.empty((K + 1, N, n, c))
            dF = np.empty((K + 1, r, c))
            vf = np.empty((K + 1, N, d, c))
            Dr = np.empty((K, N, n, c))
            Gd = np.empty((K, N, n, n, c))
            Y[0] = init
            for k in range(K + 1):
                dF[k] = exo[k]
                if endogenous:
                    dF[k] = dF[k] + np.einsum("irn,inc->rc", self.psi_grad[k], Y[k]) / N
                guess = np.einsum("iab,ibc->iac", self.A[k], Y[k] - Yp[k]) + pp[k]
                vf[k] = self.control(k, Y[k], guess, qp[k], dF[k],
                                     None if src_v is None else src_v[k])
                if k == K:
                    break
                Dr[k] = (np.einsum("ar,rc->ac", self.B0F[k], dF[k])[None]
                         + np.einsum("ab,ibc->iac", self.b1[k], Y[k])
                         + np.einsum("ae,iec->iac", self.b2[k], vf[k]))
                Gd[k] = (np.einsum("ajr,rc->ajc", self.S0F[k], dF[k])[None]
                         + np.einsum("jab,ibc->iajc", self.sig1[k], Y[k])
                         + np.einsum("jae,iec->iajc", self.sig2[k], vf[k]))
                Y[k + 1] = Y[k] + Dr[k] * dt + np.einsum("iajc,ij->iac", Gd[k], dB[k])

            p = np.empty((K + 1, N, n, c))
            q = np.zeros((K + 1, N, n, n, c))
            p[K] = (np.einsum("iab,ibc->iac", self.gxx, Y[K])
                    + np.einsum("iar,rc->iac", self.gxF, dF[K]))
            if src_term is not None:
                p[K] += src_term
            for k in range(K - 1, -1, -1):
                R = p[k + 1] - np.einsum("iab,ibc->iac", self.A[k + 1], Y[k + 1])
                Rbar, _, bR = self.bases[k].project_joint(R)
                phi = self.bases[k].phi
                X = Y[k] + Dr[k] * dt
                pbar = (np.einsum("iab,ibc->iac", self.alpha[k], X)
                        + np.einsum("jiab,ibjc->iac", self.beta[k], Gd[k]) + Rbar)
                q[k] = (np.einsum("jiab,ibc->iajc", self.beta[k], X) / dt
                        + np.einsum("iab,ibjc->iajc", self.alpha[k], Gd[k])
                        + np.einsum("im,jmac->iajc", phi, bR) / sqdt)
                drive = (np.einsum("ba,ibc->iac", self.b1[k], pbar)
                         + np.einsum("jba,ibjc->iac", self.sig1[k], q[k])
                         + np.einsum("iab,ibc->iac", self.fxx[k], Y[k])
                         + np.einsum("iae,iec->iac", self.fxv[k], vf[k])
                         + np.einsum("iar,rc->iac", self.fxF[k], dF[k]))
                if src_drive is not None:
                    drive = drive + src_drive[k]
                p[k] = pbar + drive * dt
            scale = 1.0 + max(np.abs(Y).max(), np.abs(p).max())
            change = max(np.abs(Y - Yp).max(), np.abs(p - pp).max()) / scale
            trace.append(float(change))
            if not np.isfinite(change):
                break
            Yp, pp, qp = Y, p, q
            if change <= tol:
                v = np.stack([self.control(k, Y[k], p[k], q[k], dF[k],
                                           None if src_v is None else src_v[k])
                              for k in range(K + 1)])
                return LinearFlow(self.base.grid, Y, p, q, v, dF, kind, sweep)
        raise PicardDivergence(f"linear {kind} flow did not converge", trace)

    def cloud_average(self, k, Y_dir):
        """mean_i grad psi(Y_i) Y'_i at node k: (r, c)."""
        return np.einsum("irn,inc->rc", self.psi_grad[k], Y_dir) / self.N


# ---------------------------------------------------------------------------
# public flows
# ---------------------------------------------------------------------------

def _identity_init(N, n):
    return np.broadcast_to(np.eye(n), (N, n, n)).copy()


def solve_jacobian_x(model, base: FbsdeSolution, flow: MeasureFlow | None = None) -> LinearFlow:
    """Derivative of the player's solution in the initial state x (columns = directions).

    The population flow is frozen, so there is no mean-field feedback. Along an
    equilibrium base this is the Jacobian of the control problem anchored at
    each particle's initial atom.
    """
    fr = _Frozen.of(model, base)
    return fr.solve(_identity_init(fr.N, fr.n), kind="jacobian")


def _directions(eta, N, n):
    eta = np.asarray(eta, dtype=float)
    if eta.ndim == 1:
        eta = eta[:, None] if n == 1 else eta[None, :]
    if eta.ndim == 2:
        eta = eta[..., None]
    if eta.shape[0] != N:
        if N % eta.shape[0]:
            raise DimensionError("eta must give one direction per particle or per atom")
        eta = np.tile(eta, (N // eta.shape[0], 1, 1))
    if eta.shape[1] != n:
        raise DimensionError("eta dimension does not match the model")
    return eta


def jacobian_part(model, base_mfg: FbsdeSolution, eta) -> LinearFlow:
    """D_xY|_{x=xi} eta: the frozen-population flow started from eta."""
    fr = _Frozen.of(model, base_mfg)
    return fr.solve(_directions(eta, fr.N, fr.n), kind="jacobian_eta")


def solve_directional(model, base_mfg: FbsdeSolution, flow: MeasureFlow | None, eta) -> LinearFlow:
    """Gateaux derivative of the equilibrium in the direction eta of the initial state.

    Population terms use the feature perturbation ``mean_i grad psi(Y_i) Y'_i``
    over the whole cloud, which equals the independent-copy expectation for
    functionals of the features.
    """
    fr = _Frozen.of(model, base_mfg)
    return fr.solve(_directions(eta, fr.N, fr.n), endogenous=True, kind="directional")


def solve_population_part(model, base_mfg: FbsdeSolution, eta,
                          jac: LinearFlow | None = None) -> LinearFlow:
    """The flow with zero initial value driven by the population response to eta."""
    fr = _Frozen.of(model, base_mfg)
    jac = jac if jac is not None else jacobian_part(model, base_mfg, eta)
    exo = np.stack([fr.cloud_average(k, jac.Y[k]) for k in range(fr.K + 1)])
    return fr.solve(np.zeros_like(jac.Y[0]), exo=exo, endogenous=True, kind="population")


def decompose_directional(model, base_mfg: FbsdeSolution, flow: MeasureFlow | None, eta):
    """Split the directional flow into its frozen-population and population parts."""
    jac = jacobian_part(model, base_mfg, eta)
    return jac, solve_population_part(model, base_mfg, eta, jac)


def _probe_sources(model, fr_eq: _Frozen, control_sols, jacs, hessians=None):
    """Exogenous feature perturbations from the probe players (r, P * n) per node."""
    K = fr_eq.K
    cols = []
    for sol, jac in zip(control_sols, jacs):
        block = np.empty((K + 1, model.r, model.n))
        for k in range(K + 1):
            block[k] = np.einsum("irn,inc->rc", model.phi.grad(sol.Y[k]), jac.Y[k]) / sol.N
        cols.append(block)
    first = np.concatenate(cols, axis=2)
    if hessians is None:
        return first, None
    cols2 = []
    for sol, jac, hes in zip(control_sols, jacs, hessians):
        block = np.empty((K + 1, model.r, 1))
        for k in range(K + 1):
            H = model.phi.hess(sol.Y[k])[:, :, 0, 0]
            G = model.phi.grad(sol.Y[k])[:, :, 0]
            block[k, :, 0] = np.mean(H * jac.Y[k, :, 0, 0][:, None] ** 2
                                     + G * hes.Y[k, :, 0, 0][:, None], axis=0)
        cols2.append(block)
    return first, np.concatenate(cols2, axis=2)


def solve_lfd_kernel(model, base_mfg: FbsdeSolution, base_control: FbsdeSolution | None,
                     flow: MeasureFlow, z, params=None, second_order: bool = False) -> KernelFlow:
    """Kernels of the linear functional derivative at the probes z.

    For each probe a player started at z is solved against the equilibrium
    flow together with its Jacobian; the resulting feature perturbation drives
    the equilibrium kernel, whose total feature perturbation then drives the
    kernel of the player started at x (when ``base_control`` is given).
    """
    from .fbsde import solve_control

    z = np.atleast_2d(np.asarray(z, dtype=float))
    if model.n == 1 and z.shape[0] == 1 and z.shape[1] != 1:
        z = z.T
    if z.shape[1] != model.n:
        raise DimensionError("probe dimension does not match the model")
    if second_order and (model.n != 1 or model.d != 1):
        raise UnsupportedDimension("second z-derivatives are implemented for n = d = 1")
    grid = base_mfg.grid
    if params is None:
        from .fbsde import SolverParams
        params = SolverParams(N=base_mfg.N)
    fr_eq = _Frozen.of(model, base_mfg)
    sols, jacs, hess = [], [], []
    for zz in z:
        sol = solve_control(model, grid.t0, zz, flow, grid, params)
        sols.append(sol)
        jacs.append(solve_jacobian_x(model, sol))
        if second_order:
            hess.append(solve_hessian_x(model, sol, jac=jacs[-1]))
    exo, exo2 = _probe_sources(model, fr_eq, sols, jacs, hess if second_order else None)
    zero = np.zeros((fr_eq.N, model.n, exo.shape[2]))
    xi = fr_eq.solve(zero, exo=exo, endogenous=True, kind="kernel_eq")
    out = KernelFlow(z=z, xi=xi, extras={"probe_solutions": sols, "probe_jacobians": jacs})
    if second_order:
        xi2 = fr_eq.solve(np.zeros((fr_eq.N, 1, exo2.shape[2])), exo=exo2, endogenous=True,
                          kind="kernel_eq_zz")
        out.xi_zz = xi2
        out.extras["probe_hessians"] = hess
    if base_control is not None:
        fr_x = _Frozen.of(model, base_control)
        out.mu = fr_x.solve(np.zeros((fr_x.N, model.n, xi.columns)), exo=xi.dF, kind="kernel_x")
        if second_order:
            out.mu_zz = fr_x.solve(np.zeros((fr_x.N, 1, out.xi_zz.columns)), exo=out.xi_zz.dF,
                                   kind="kernel_x_zz")
    return out


def solve_hessian_x(model, base: FbsdeSolution, flow: MeasureFlow | None = None,
                    jac: LinearFlow | None = None) -> LinearFlow:
    """Second derivative in x of the player's solution (n = d = 1)."""
    if model.n != 1 or model.d != 1:
        raise DimensionError("the second-order flow is implemented for n = d = 1")
    fr = _Frozen.of(model, base)
    jac = jac if jac is not None else solve_jacobian_x(model, base)
    K, g = fr.K, base.grid
    s = g.nodes
    src_v = np.empty((K + 1, fr.N, 1, 1))
    src_drive = np.empty((K, fr.N, 1, 1))
    for k in range(K + 1):
        t3 = model.third_derivatives(s[k], base.Y[k], base.F[k], base.v[k])
        dx = jac.Y[k, :, 0, 0]
        dv = jac.v[k, :, 0, 0]
        fvv = fr.sens[k]["fvv_inv"][:, 0, 0]
        src_v[k, :, 0, 0] = -(t3["fxxv"] * dx ** 2 + 2 * t3["fxvv"] * dx * dv
                              + t3["fvvv"] * dv ** 2) * fvv
        if k < K:
            src_drive[k, :, 0, 0] = (t3["fxxx"] * dx ** 2 + 2 * t3["fxxv"] * dx * dv
                                     + t3["fxvv"] * dv ** 2)
    src_term = (model.gxxx(base.Y[K], base.F[K]) * jac.Y[K, :, 0, 0] ** 2)[:, None, None]
    return fr.solve(np.zeros((fr.N, 1, 1)), src_v=src_v, src_drive=src_drive,
                    src_term=src_term, kind="hessian")
