"""Maximum-entropy LQR and the KL-constrained C-step.

The C-step minimizes expected cost subject to KL(p(tau) || pi_bar(tau)) <= epsilon.
Its Lagrangian is minimized in closed form by running max-entropy LQR on the
surrogate cost l/eta - log pi_bar(u|x); the scalar dual variable eta is found
by bisection on log(eta), using that the achieved KL is non-increasing in eta.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, NumericalError
from .trajdist import LOG_2PI, QuadraticCostExpansion, TimeVaryingLinGauss, traj_kl

log = logging.getLogger(__name__)

ETA_MIN = 1e-8
ETA_MAX = 1e16
REG_START = 1e-6
DIVERGENCE_LIMIT = 1e12


@dataclass(frozen=True, eq=False)
class QFunction:
    Qxx: np.ndarray
    Quu: np.ndarray
    Qux: np.ndarray
    Qx: np.ndarray
    Qu: np.ndarray
    Vxx: np.ndarray
    Vx: np.ndarray
    Vc: np.ndarray
    reg: np.ndarray
    n_regularized: int

    def value(self, t, x):
        """Max-entropy cost-to-go (expected surrogate cost minus entropy) from x at step t."""
        return 0.5 * x @ self.Vxx[t] @ x + self.Vx[t] @ x + self.Vc[t]


@dataclass
class DualState:
    epsilon: float
    eta: float = 1.0
    eta_lo: float = ETA_MIN
    eta_hi: float = ETA_MAX
    kl: float = math.nan
    trace: list = field(default_factory=list)
    converged: bool = False
    slack: bool = False
    warning: str | None = None


def surrogate_expand(cost, pi_bar, eta):
    """Quadratic expansion of l(x,u)/eta - log pi_bar(u|x) about the cost's nominal points."""
    if not eta > 0:
        raise InvalidInputError(f"eta must be positive, got {eta}")
    if pi_bar.T != cost.T or pi_bar.dim_in != cost.dx or pi_bar.dim_out != cost.du:
        raise InvalidInputError("linearized policy does not match cost expansion")
    dx = cost.dx
    P, K = pi_bar.precision, pi_bar.K
    PK = P @ K
    H = np.empty_like(cost.H)
    H[:, :dx, :dx] = np.swapaxes(K, 1, 2) @ PK
    H[:, :dx, dx:] = -np.swapaxes(PK, 1, 2)
    H[:, dx:, :dx] = -PK
    H[:, dx:, dx:] = P
    x_hat, u_hat = cost.z_hat[:, :dx], cost.z_hat[:, dx:]
    r = u_hat - np.einsum("tij,tj->ti", K, x_hat) - pi_bar.k
    Pr = np.einsum("tij,tj->ti", P, r)
    g = np.concatenate([-np.einsum("tji,tj->ti", K, Pr), Pr], axis=1)
    c = 0.5 * np.einsum("ti,ti->t", r, Pr) + 0.5 * (cost.du * LOG_2PI + pi_bar.logdet)
    neglog = QuadraticCostExpansion(H, g, c, cost.z_hat, dx)
    return cost.scaled(1.0 / eta) + neglog


def _factor_with_reg(Quu, t):
    mu = 0.0
    while True:
        try:
            return np.linalg.cholesky(Quu + mu * np.eye(len(Quu))), mu
        except np.linalg.LinAlgError:
            mu = REG_START if mu == 0.0 else 2.0 * mu
            if mu > DIVERGENCE_LIMIT:
                raise NumericalError("Q_uu could not be regularized", t) from None


def maxent_lqr_backward(dyn, cost):
    """Backward pass minimizing sum_t E[l_t] - H(p(u_t|x_t)) under linear-Gaussian dynamics.

    Returns the controller N(K_t x + k_t, Q_uu^-1) and the Q-function. Q_uu is
    regularized by adding mu*I (mu doubling from 1e-6) only when its Cholesky
    factorization fails; the number of regularized steps is reported.
    """
    T, dx, du = cost.T, cost.dx, cost.du
    if T > 1 and (dyn.T < T - 1 or dyn.dim_out != dx or dyn.dim_in != dx + du):
        raise InvalidInputError("dynamics do not match cost expansion")
    H, h, c0 = cost.absolute()
    eye = np.eye(du)
    out = {name: np.empty(shape) for name, shape in (
        ("Qxx", (T, dx, dx)), ("Quu", (T, du, du)), ("Qux", (T, du, dx)), ("Qx", (T, dx)),
        ("Qu", (T, du)), ("Vxx", (T, dx, dx)), ("Vx", (T, dx)), ("Vc", T), ("reg", T))}
    K = np.empty((T, du, dx))
    k = np.empty((T, du))
    C = np.empty((T, du, du))
    V, v, vc = np.zeros((dx, dx)), np.zeros(dx), 0.0
    const_entropy = 0.5 * du * (LOG_2PI + 1.0)
    for t in range(T - 1, -1, -1):
        Q, q, qc = H[t].copy(), h[t].copy(), c0[t]
        if t < T - 1:
            f, fc = dyn.K[t], dyn.k[t]
            Vf = V @ f
            Q += f.T @ Vf
            q += f.T @ (V @ fc + v)
            qc += 0.5 * fc @ V @ fc + v @ fc + 0.5 * np.sum(V * dyn.cov[t]) + vc
        Q = 0.5 * (Q + Q.T)
        Qxx, Quu, Qux = Q[:dx, :dx], Q[dx:, dx:], Q[dx:, :dx]
        qx, qu = q[:dx], q[dx:]
        L, mu = _factor_with_reg(Quu, t)
        Linv = np.linalg.solve(L, eye)
        Quu_inv = Linv.T @ Linv
        Kt = -Quu_inv @ Qux
        kt = -Quu_inv @ qu
        # cost-to-go of the chosen controller under the unregularized Q
        QuuK = Quu @ Kt
        V = Qxx + Kt.T @ QuuK + Qux.T @ Kt + Kt.T @ Qux
        V = 0.5 * (V + V.T)
        v = qx + Kt.T @ (Quu @ kt) + Qux.T @ kt + Kt.T @ qu
        logdet_C = 2.0 * np.log(np.diag(Linv)).sum()
        vc = qc + 0.5 * kt @ Quu @ kt + kt @ qu + 0.5 * np.sum(Quu * Quu_inv) \
            - (const_entropy + 0.5 * logdet_C)
        if not np.isfinite(V).all() or np.abs(V).max() > DIVERGENCE_LIMIT:
            raise NumericalError("value function diverged", t)
        K[t], k[t], C[t] = Kt, kt, 0.5 * (Quu_inv + Quu_inv.T)
        for name, val in (("Qxx", Qxx), ("Quu", Quu), ("Qux", Qux), ("Qx", qx), ("Qu", qu),
                          ("Vxx", V), ("Vx", v), ("Vc", vc), ("reg", mu)):
            out[name][t] = val
    qf = QFunction(n_regularized=int(np.count_nonzero(out["reg"])), **out)
    return TimeVaryingLinGauss(K, k, C), qf


def c_step(dyn, cost, pi_bar, epsilon, init_mean, init_cov, eta0=None, kl_tol=0.05,
           max_iter=50):
    """KL-constrained local policy update against the linearized global policy.

    Returns ``(controller, achieved_kl, dual_state)``. The dual search starts at
    ``eta0`` (warm start), grows/shrinks the bracket geometrically from the
    default [1e-4, 1e4] until the KL constraint changes sign, then bisects on
    log(eta) until |KL - epsilon| <= kl_tol * epsilon.
    """
    if not epsilon > 0:
        raise InvalidInputError(f"epsilon must be positive, got {epsilon}")
    dual = DualState(epsilon=float(epsilon))
    cache = {}

    def solve(eta):
        eta = float(np.clip(eta, ETA_MIN, ETA_MAX))
        if eta not in cache:
            try:
                ctrl, _ = maxent_lqr_backward(dyn, surrogate_expand(cost, pi_bar, eta))
                kl = traj_kl(ctrl, pi_bar, dyn, init_mean, init_cov)
            except (NumericalError, InvalidInputError) as exc:
                log.debug("eta=%g rejected: %s", eta, exc)
                ctrl, kl = None, math.inf
            cache[eta] = (ctrl, kl)
            dual.trace.append((eta, kl))
        return eta, cache[eta]

    def within(kl):
        return abs(kl - epsilon) <= kl_tol * epsilon

    def finish(eta, converged, slack=False, warning=None):
        ctrl, kl = cache[eta]
        dual.eta, dual.kl, dual.converged, dual.slack, dual.warning = eta, kl, converged, slack, warning
        if warning:
            log.warning(warning)
        return ctrl, kl, dual

    eta, (_, kl) = solve(1.0 if eta0 is None else eta0)
    if within(kl):
        return finish(eta, True)
    if kl > epsilon:
        lo, hi = eta, max(1e4, 10.0 * eta)
        while True:
            hi, (_, kl_hi) = solve(hi)
            if kl_hi <= epsilon or within(kl_hi):
                break
            if hi >= ETA_MAX:
                raise NumericalError("no eta satisfies the KL constraint")
            lo, hi = hi, hi * 100.0
        if within(kl_hi):
            return finish(hi, True)
    else:
        lo, hi = min(1e-4, 0.1 * eta), eta
        while True:
            lo, (_, kl_lo) = solve(lo)
            if kl_lo > epsilon or within(kl_lo):
                break
            if lo <= ETA_MIN:
                return finish(lo, True, slack=True)
            lo, hi = max(lo / 100.0, ETA_MIN), lo
        if within(kl_lo):
            return finish(lo, True)
    dual.eta_lo, dual.eta_hi = lo, hi
    while len(dual.trace) < max_iter:
        mid, (_, kl) = solve(math.sqrt(lo * hi))
        if within(kl):
            dual.eta_lo, dual.eta_hi = lo, hi
            return finish(mid, True)
        if kl > epsilon:
            lo = mid
        else:
            hi = mid
        dual.eta_lo, dual.eta_hi = lo, hi
        if hi / lo < 1.0 + 1e-12:
            break
    feasible = [(kl, eta) for eta, kl in dual.trace if kl <= epsilon]
    _, best = max(feasible)
    return finish(best, False, warning=(
        f"dual search did not reach |KL - eps| <= {kl_tol} eps after {len(dual.trace)} "
        f"evaluations; returning feasible eta={best:.3g}"))
