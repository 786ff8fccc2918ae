"""Gaussian trajectory-distribution algebra.

Everything here is closed form: KL divergences between linear-Gaussian
controllers, forward propagation of state-action marginals through
linear-Gaussian dynamics, and expected quadratic costs under those marginals.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import InvalidInputError

LOG_2PI = np.log(2.0 * np.pi)


def _frozen(a, ndim=None, name="array"):
    a = np.array(a, dtype=float)
    if ndim is not None and a.ndim != ndim:
        raise InvalidInputError(f"{name} must have {ndim} dimensions, got shape {a.shape}")
    a.setflags(write=False)
    return a


def _cholesky(cov, name):
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise InvalidInputError(f"{name} is not positive definite") from exc


@dataclass(frozen=True, eq=False)
class TimeVaryingLinGauss:
    """A length-T sequence of affine-Gaussian conditionals N(K_t z + k_t, cov_t).

    Used for controllers (z = x_t, output u_t), linearized global policies,
    and fitted dynamics (z = [x_t; u_t], output x_{t+1}).
    """

    K: np.ndarray
    k: np.ndarray
    cov: np.ndarray
    chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        K = _frozen(self.K, 3, "K")
        T, dout, _ = K.shape
        k = _frozen(self.k, 2, "k")
        cov = _frozen(self.cov, 3, "cov")
        if T < 1:
            raise InvalidInputError("horizon must be positive")
        if k.shape != (T, dout) or cov.shape != (T, dout, dout):
            raise InvalidInputError(
                f"inconsistent shapes K{K.shape} k{k.shape} cov{cov.shape}")
        if not np.allclose(cov, np.swapaxes(cov, 1, 2), rtol=0.0, atol=1e-10):
            raise InvalidInputError("covariances must be symmetric")
        chol = _cholesky(cov, "covariance")
        chol.setflags(write=False)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "chol", chol)

    @classmethod
    def time_invariant(cls, K, k, cov, T):
        K, k, cov = np.asarray(K, float), np.asarray(k, float), np.asarray(cov, float)
        return cls(np.repeat(K[None], T, 0), np.repeat(k[None], T, 0),
                   np.repeat(cov[None], T, 0))

    @classmethod
    def from_dynamics(cls, fx, fu, fc, F):
        return cls(np.concatenate([fx, fu], axis=2), fc, F)

    @property
    def T(self):
        return self.K.shape[0]

    @property
    def dim_out(self):
        return self.K.shape[1]

    @property
    def dim_in(self):
        return self.K.shape[2]

    @cached_property
    def precision(self):
        eye = np.eye(self.dim_out)
        inv_chol = np.linalg.solve(self.chol, np.broadcast_to(eye, self.cov.shape))
        return np.swapaxes(inv_chol, 1, 2) @ inv_chol

    @cached_property
    def logdet(self):
        return 2.0 * np.log(np.diagonal(self.chol, axis1=1, axis2=2)).sum(axis=1)

    def mean(self, t, z):
        return self.K[t] @ z + self.k[t]

    def logpdf(self, t, z, out):
        """Log density of ``out`` given input ``z`` at step ``t``."""
        r = np.asarray(out, float) - self.mean(t, z)
        w = np.linalg.solve(self.chol[t], r)
        return -0.5 * (w @ w) - 0.5 * self.logdet[t] - 0.5 * self.dim_out * LOG_2PI

    def sample(self, t, z, rng):
        return self.mean(t, z) + self.chol[t] @ rng.standard_normal(self.dim_out)

    def truncated(self, T):
        return TimeVaryingLinGauss(self.K[:T], self.k[:T], self.cov[:T])


@dataclass(frozen=True, eq=False)
class GaussianMarginals:
    """Per-step joint moments of (x_t, u_t); ``next_*`` hold x_{T+1} when known."""

    mean: np.ndarray
    cov: np.ndarray
    dx: int
    next_mean: np.ndarray | None = None
    next_cov: np.ndarray | None = None

    @property
    def T(self):
        return self.mean.shape[0]

    @property
    def state_mean(self):
        return self.mean[:, :self.dx]

    @property
    def state_cov(self):
        return self.cov[:, :self.dx, :self.dx]

    @property
    def action_mean(self):
        return self.mean[:, self.dx:]

    @property
    def action_cov(self):
        return self.cov[:, self.dx:, self.dx:]


@dataclass(frozen=True, eq=False)
class QuadraticCostExpansion:
    """Second-order expansion of l(x, u) about nominal points z_hat_t = [x_hat; u_hat].

    l_t(z) ~= c_t + g_t.(z - z_hat_t) + 1/2 (z - z_hat_t)' H_t (z - z_hat_t)
    """

    H: np.ndarray
    g: np.ndarray
    c: np.ndarray
    z_hat: np.ndarray
    dx: int

    def __post_init__(self):
        H = _frozen(self.H, 3, "H")
        T, n, _ = H.shape
        g, c, z_hat = _frozen(self.g, 2, "g"), _frozen(self.c, 1, "c"), _frozen(self.z_hat, 2, "z_hat")
        if g.shape != (T, n) or c.shape != (T,) or z_hat.shape != (T, n) or not 0 < self.dx < n:
            raise InvalidInputError("inconsistent cost expansion shapes")
        if not np.allclose(H, np.swapaxes(H, 1, 2), rtol=0.0, atol=1e-10):
            raise InvalidInputError("cost Hessian must be symmetric")
        for name, val in (("H", H), ("g", g), ("c", c), ("z_hat", z_hat)):
            object.__setattr__(self, name, val)

    @classmethod
    def from_blocks(cls, lxx, luu, lux, lx, lu, l0, x_hat, u_hat):
        lxx, luu, lux = np.asarray(lxx, float), np.asarray(luu, float), np.asarray(lux, float)
        top = np.concatenate([lxx, np.swapaxes(lux, 1, 2)], axis=2)
        bottom = np.concatenate([lux, luu], axis=2)
        return cls(np.concatenate([top, bottom], axis=1),
                   np.concatenate([lx, lu], axis=1), np.asarray(l0, float),
                   np.concatenate([x_hat, u_hat], axis=1), np.shape(lxx)[1])

    @classmethod
    def from_absolute(cls, H, h, c0, z_hat, dx):
        """Build from l(z) = 1/2 z'Hz + h'z + c0, re-expressed about ``z_hat``."""
        Hz = np.einsum("tij,tj->ti", H, z_hat)
        g = h + Hz
        c = c0 + np.einsum("ti,ti->t", h, z_hat) + 0.5 * np.einsum("ti,ti->t", z_hat, Hz)
        return cls(H, g, c, z_hat, dx)

    @classmethod
    def zeros(cls, T, dx, du):
        n = dx + du
        return cls(np.zeros((T, n, n)), np.zeros((T, n)), np.zeros(T), np.zeros((T, n)), dx)

    @property
    def T(self):
        return self.H.shape[0]

    @property
    def du(self):
        return self.H.shape[1] - self.dx

    lxx = property(lambda self: self.H[:, :self.dx, :self.dx])
    luu = property(lambda self: self.H[:, self.dx:, self.dx:])
    lux = property(lambda self: self.H[:, self.dx:, :self.dx])
    lx = property(lambda self: self.g[:, :self.dx])
    lu = property(lambda self: self.g[:, self.dx:])

    @property
    def min_hessian_eig(self):
        return np.linalg.eigvalsh(self.H).min(axis=1)

    def absolute(self):
        """Return (H, h, c0) with l(z) = 1/2 z'Hz + h'z + c0."""
        Hz = np.einsum("tij,tj->ti", self.H, self.z_hat)
        h = self.g - Hz
        c0 = self.c - np.einsum("ti,ti->t", self.g, self.z_hat) \
            + 0.5 * np.einsum("ti,ti->t", self.z_hat, Hz)
        return self.H, h, c0

    def recentered(self, z_hat):
        return QuadraticCostExpansion.from_absolute(*self.absolute(), np.asarray(z_hat, float), self.dx)

    def evaluate(self, t, x, u):
        d = np.concatenate([x, u]) - self.z_hat[t]
        return self.c[t] + self.g[t] @ d + 0.5 * d @ self.H[t] @ d

    def scaled(self, a):
        return QuadraticCostExpansion(a * self.H, a * self.g, a * self.c, self.z_hat, self.dx)

    def __add__(self, other):
        if not isinstance(other, QuadraticCostExpansion):
            return NotImplemented
        if other.H.shape != self.H.shape or other.dx != self.dx:
            raise InvalidInputError("cannot add expansions of different shape")
        o = other if np.array_equal(other.z_hat, self.z_hat) else other.recentered(self.z_hat)
        return QuadraticCostExpansion(self.H + o.H, self.g + o.g, self.c + o.c, self.z_hat, self.dx)


def _check_state_moments(dx, mean, cov):
    mean, cov = np.asarray(mean, float), np.asarray(cov, float)
    if mean.shape != (dx,) or cov.shape != (dx, dx):
        raise InvalidInputError(f"state moments must have shapes ({dx},), ({dx},{dx})")
    return mean, cov


def _check_pair(p, q):
    if (p.dim_out, p.dim_in) != (q.dim_out, q.dim_in):
        raise InvalidInputError(
            f"controller dimensions differ: {p.dim_out}x{p.dim_in} vs {q.dim_out}x{q.dim_in}")


def kl_step(p, q, t, state_mean, state_cov):
    """E_{x ~ N(state_mean, state_cov)} KL(p(.|x) || q(.|x)) at step ``t``."""
    _check_pair(p, q)
    m, S = _check_state_moments(p.dim_in, state_mean, state_cov)
    du = p.dim_out
    Pq = q.precision[t]
    dK = p.K[t] - q.K[t]
    dmean = dK @ m + p.k[t] - q.k[t]
    quad = dmean @ Pq @ dmean + np.trace(dK.T @ Pq @ dK @ S)
    val = 0.5 * (np.trace(Pq @ p.cov[t]) - du + q.logdet[t] - p.logdet[t] + quad)
    return max(val, 0.0)


def kl_per_step(p, q, marg):
    """Per-step expected conditional KL(p || q) under the given state marginals."""
    _check_pair(p, q)
    if marg.T != p.T or marg.dx != p.dim_in:
        raise InvalidInputError("marginals do not match controller")
    Pq = q.precision
    dK = p.K - q.K
    m, S = marg.state_mean, marg.state_cov
    dmean = np.einsum("tij,tj->ti", dK, m) + p.k - q.k
    quad = np.einsum("ti,tij,tj->t", dmean, Pq, dmean) \
        + np.einsum("tji,tjk,tkl,tli->t", dK, Pq, dK, S)
    tr = np.einsum("tij,tji->t", Pq, p.cov)
    return np.maximum(0.5 * (tr - p.dim_out + q.logdet - p.logdet + quad), 0.0)


def traj_kl(p, q, dyn, init_mean, init_cov):
    """KL(p(tau) || q(tau)) for two controllers sharing dynamics and initial state."""
    _check_pair(p, q)
    return float(kl_per_step(p, q, propagate_marginals(p, dyn, init_mean, init_cov)).sum())


def propagate_marginals(ctrl, dyn, init_mean, init_cov):
    """Forward-propagate Gaussian state-action marginals of ``ctrl`` under ``dyn``.

    ``dyn`` needs at least T-1 steps; if it has T, the moments of x_{T+1} are
    stored as ``next_mean``/``next_cov``.
    """
    dx, du, T = ctrl.dim_in, ctrl.dim_out, ctrl.T
    if dyn.dim_out != dx or dyn.dim_in != dx + du:
        raise InvalidInputError(
            f"dynamics {dyn.dim_out}x{dyn.dim_in} incompatible with controller {du}x{dx}")
    if dyn.T < T - 1:
        raise InvalidInputError(f"dynamics horizon {dyn.T} shorter than {T - 1}")
    mu_x, sig_x = _check_state_moments(dx, init_mean, init_cov)
    n = dx + du
    mean = np.empty((T, n))
    cov = np.empty((T, n, n))
    next_mean = next_cov = None
    for t in range(T):
        K = ctrl.K[t]
        sxk = sig_x @ K.T
        mean[t, :dx] = mu_x
        mean[t, dx:] = K @ mu_x + ctrl.k[t]
        cov[t, :dx, :dx] = sig_x
        cov[t, :dx, dx:] = sxk
        cov[t, dx:, :dx] = sxk.T
        cov[t, dx:, dx:] = K @ sxk + ctrl.cov[t]
        if t < dyn.T:
            f = dyn.K[t]
            mu_x = f @ mean[t] + dyn.k[t]
            sig_x = f @ cov[t] @ f.T + dyn.cov[t]
            sig_x = 0.5 * (sig_x + sig_x.T)
            if t == T - 1:
                next_mean, next_cov = mu_x, sig_x
    return GaussianMarginals(mean, cov, dx, next_mean, next_cov)


def expected_cost_per_step(marg, cost):
    if cost.T != marg.T or cost.dx != marg.dx or cost.H.shape[1] != marg.mean.shape[1]:
        raise InvalidInputError("cost expansion does not match marginals")
    m = marg.mean - cost.z_hat
    return (0.5 * np.einsum("tij,tji->t", cost.H, marg.cov)
            + 0.5 * np.einsum("ti,tij,tj->t", m, cost.H, m)
            + np.einsum("ti,ti->t", cost.g, m) + cost.c)


def expected_cost(marg, cost):
    """Total expected quadratic cost under the Gaussian state-action marginals."""
    return float(expected_cost_per_step(marg, cost).sum())


def entropy(ctrl):
    """Per-step differential entropy 1/2 log|2 pi e C_t| of the action conditionals."""
    return 0.5 * (ctrl.dim_out * (LOG_2PI + 1.0) + ctrl.logdet)
