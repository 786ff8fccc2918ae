"""Per-step linear-Gaussian regression with a Gaussian-mixture prior.

Each time step's joint samples z = [input; output] are combined with a
normal-inverse-Wishart prior whose mean and scatter come from a GMM fit to
samples pooled over all steps (and the previous iteration). With N samples at
the step, empirical moments (mu_hat, S_hat) and prior moments (mu0, Phi) with
pseudo-count m, the posterior joint moments are

    mu    = (N mu_hat + m mu0) / (N + m)
    Sigma = (N S_hat + m Phi + N m / (N + m) (mu_hat - mu0)(mu_hat - mu0)^T) / (N + m)

and the conditional of output given input is read off Sigma. At m = 0 this is
ordinary least squares.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import InvalidInputError
from .policy import floor_eigenvalues
from .trajdist import TimeVaryingLinGauss

log = logging.getLogger(__name__)

RESIDUAL_FLOOR = 1e-6
GMM_RIDGE = 1e-6


@dataclass(frozen=True, eq=False)
class SampleSet:
    """Trajectories of one condition: states (n, T, dx), actions (n, T, du)."""
    condition: int
    states: np.ndarray
    actions: np.ndarray
    source: str = "local"

    def __post_init__(self):
        X = np.array(self.states, dtype=float)
        U = np.array(self.actions, dtype=float)
        if X.ndim != 3 or U.ndim != 3 or X.shape[:2] != U.shape[:2]:
            raise InvalidInputError("states and actions must be (n, T, dx) and (n, T, du)")
        if X.shape[0] == 0:
            raise InvalidInputError("a sample set needs at least one trajectory")
        if self.source not in ("local", "global"):
            raise InvalidInputError(f"unknown sample source {self.source!r}")
        X.setflags(write=False)
        U.setflags(write=False)
        object.__setattr__(self, "states", X)
        object.__setattr__(self, "actions", U)
        n, _, dx = X.shape
        if n < dx + U.shape[2] + 1:
            log.debug("condition %d: %d samples per step is below the %d regression "
                      "degrees of freedom; relying on the prior", self.condition, n,
                      dx + U.shape[2] + 1)

    @property
    def n(self):
        return self.states.shape[0]

    @property
    def T(self):
        return self.states.shape[1]

    @property
    def dx(self):
        return self.states.shape[2]

    @property
    def du(self):
        return self.actions.shape[2]


def dynamics_vectors(samples):
    """Joint [x_t; u_t; x_{t+1}] vectors shaped (n, T-1, 2dx+du)."""
    X, U = samples.states, samples.actions
    return np.concatenate([X[:, :-1], U[:, :-1], X[:, 1:]], axis=2)


# ---------------------------------------------------------------- GMM


@dataclass(frozen=True, eq=False)
class GmmPrior:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    strength: float = 1.0
    regularized: bool = False
    log_likelihoods: tuple = field(default=())

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if (w <= 0).any() or abs(w.sum() - 1.0) > 1e-9:
            raise InvalidInputError("mixture weights must be positive and sum to one")
        if self.strength < 0:
            raise InvalidInputError("prior strength must be nonnegative")

    @property
    def n_components(self):
        return len(self.weights)

    @property
    def dim(self):
        return self.means.shape[1]

    def with_strength(self, strength):
        return GmmPrior(self.weights, self.means, self.covs, strength, self.regularized,
                        self.log_likelihoods)

    def log_resp(self, Z):
        """Log responsibilities (n, K) and per-point log-likelihoods (n,)."""
        return _estep(Z, self.weights, self.means, self.covs)

    def moments_at(self, point):
        """Mixture mean and scatter weighted by the responsibilities of ``point``."""
        lr, _ = self.log_resp(np.atleast_2d(point))
        r = np.exp(lr[0])
        mu0 = r @ self.means
        d = self.means - mu0
        Phi = np.einsum("k,kij->ij", r, self.covs) + np.einsum("k,ki,kj->ij", r, d, d)
        return mu0, 0.5 * (Phi + Phi.T)


def _estep(Z, weights, means, covs):
    L = np.linalg.cholesky(covs)
    diff = Z[None, :, :] - means[:, None, :]
    sol = np.linalg.solve(L, np.swapaxes(diff, 1, 2))
    maha = np.sum(sol * sol, axis=1)
    logdet = 2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
    d = Z.shape[1]
    logp = -0.5 * (maha + logdet[:, None] + d * np.log(2 * np.pi)) + np.log(weights)[:, None]
    ll = logsumexp(logp, axis=0)
    return (logp - ll).T, ll


def _em(Z, K, rng, max_iter, tol, ridge):
    n, d = Z.shape
    idx = rng.choice(n, size=K, replace=False)
    means = Z[idx].copy()
    base = np.cov(Z.T, bias=True).reshape(d, d) + ridge * np.eye(d)
    covs = np.broadcast_to(base, (K, d, d)).copy()
    weights = np.full(K, 1.0 / K)
    trace = []
    for _ in range(max_iter):
        lr, ll = _estep(Z, weights, means, covs)
        trace.append(float(ll.mean()))
        if len(trace) > 1 and trace[-1] - trace[-2] < tol:
            break
        r = np.exp(lr)
        Nk = r.sum(axis=0) + 1e-12
        weights = Nk / n
        means = (r.T @ Z) / Nk[:, None]
        diff = Z[None] - means[:, None]
        covs = np.einsum("nk,kni,knj->kij", r, diff, diff) / Nk[:, None, None]
        covs = 0.5 * (covs + np.swapaxes(covs, 1, 2)) + ridge * np.eye(d)
    return weights, means, covs, trace


def fit_gmm(joint_vectors, n_components=4, max_em_iters=100, seed=0, restarts=2, tol=1e-6,
            ridge=GMM_RIDGE, strength=1.0):
    """EM on a Gaussian mixture; the restart with the best log-likelihood is kept.

    Convergence is a mean per-point log-likelihood increase below ``tol``.
    Covariances carry a ``ridge`` on the diagonal; the prior is flagged as
    regularized when the data scatter itself is rank deficient.
    """
    Z = np.asarray(joint_vectors, dtype=float)
    if Z.ndim != 2:
        raise InvalidInputError("joint vectors must be a 2-D array")
    n_distinct = len(np.unique(Z, axis=0))
    if n_distinct < n_components:
        raise InvalidInputError(
            f"{n_distinct} distinct vectors cannot support {n_components} components")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        w, m, c, trace = _em(Z, n_components, rng, max_em_iters, tol, ridge)
        if best is None or trace[-1] > best[3][-1]:
            best = (w, m, c, trace)
    w, m, c, trace = best
    scatter = np.cov(Z.T, bias=True).reshape(Z.shape[1], Z.shape[1])
    deficient = np.linalg.eigvalsh(scatter).min() <= 1e-10 * max(1.0, np.abs(scatter).max())
    w = w / w.sum()
    return GmmPrior(w, m, c, strength, bool(deficient), tuple(trace))


# ---------------------------------------------------------------- regression


def posterior_moments(Z, prior=None, strength=None):
    """Joint mean and covariance for one step's samples Z (N, d) under the NIW prior."""
    N = len(Z)
    mu_hat = Z.mean(axis=0)
    diff = Z - mu_hat
    S_hat = diff.T @ diff / N
    m = 0.0 if prior is None else (prior.strength if strength is None else strength)
    if m == 0.0:
        return mu_hat, S_hat
    mu0, Phi = prior.moments_at(mu_hat)
    d = mu_hat - mu0
    mean = (N * mu_hat + m * mu0) / (N + m)
    cov = (N * S_hat + m * Phi + (N * m / (N + m)) * np.outer(d, d)) / (N + m)
    return mean, 0.5 * (cov + cov.T)


def conditional_gaussian(mean, cov, n_in):
    """Gain, bias and floored residual covariance of z[n_in:] given z[:n_in]."""
    Sxx, Syx, Syy = cov[:n_in, :n_in], cov[n_in:, :n_in], cov[n_in:, n_in:]
    F = np.linalg.lstsq(Sxx, Syx.T, rcond=None)[0].T
    fc = mean[n_in:] - F @ mean[:n_in]
    resid = Syy - F @ Syx.T
    return F, fc, floor_eigenvalues(resid, RESIDUAL_FLOOR)


def _fit_steps(Z, n_in, prior, strength):
    n_steps = Z.shape[1]
    d_out = Z.shape[2] - n_in
    F = np.empty((n_steps, d_out, n_in))
    fc = np.empty((n_steps, d_out))
    cov = np.empty((n_steps, d_out, d_out))
    for t in range(n_steps):
        mean, S = posterior_moments(Z[:, t], prior, strength)
        F[t], fc[t], cov[t] = conditional_gaussian(mean, S, n_in)
    return F, fc, cov


def fit_linear_gaussian(samples, prior=None, mode="dynamics", strength=None, horizon=None):
    """Per-step linear-Gaussian fit.

    ``mode="dynamics"`` regresses x_{t+1} on (x_t, u_t) and returns T-1 steps;
    ``mode="policy"`` regresses u_t on x_t and returns T steps. ``strength``
    overrides the prior's pseudo-count; 0 (or no prior) gives least squares.
    """
    if horizon is not None and horizon != samples.T:
        raise InvalidInputError(f"samples have horizon {samples.T}, expected {horizon}")
    dx, du = samples.dx, samples.du
    if mode == "dynamics":
        Z, n_in = dynamics_vectors(samples), dx + du
    elif mode == "policy":
        Z, n_in = np.concatenate([samples.states, samples.actions], axis=2), dx
    else:
        raise InvalidInputError(f"unknown fit mode {mode!r}")
    if prior is not None and prior.dim != Z.shape[2]:
        raise InvalidInputError(f"prior dimension {prior.dim} does not match {Z.shape[2]}")
    F, fc, cov = _fit_steps(Z, n_in, prior, strength)
    return TimeVaryingLinGauss(F, fc, cov)


def fit_policy_linearization(samples, policy, prior=None, strength=None, targets="mean"):
    """Time-varying linearization of the global policy around the sampled states.

    Regresses the policy's mean output (``targets="mean"``) or the sampled
    actions (``targets="sampled"``) on the states, step by step. The fitted
    covariance is replaced by the policy's own covariance.
    """
    X = samples.states
    if targets == "mean":
        n, T, dx = X.shape
        U = policy.mean(X.reshape(n * T, dx)).reshape(n, T, -1)
    elif targets == "sampled":
        U = samples.actions
    else:
        raise InvalidInputError(f"unknown linearization target {targets!r}")
    Z = np.concatenate([X, U], axis=2)
    if prior is not None and prior.dim != Z.shape[2]:
        raise InvalidInputError("prior dimension does not match [x; u]")
    F, fc, _ = _fit_steps(Z, samples.dx, prior, strength)
    return TimeVaryingLinGauss(F, fc, np.broadcast_to(policy.cov, (samples.T, *policy.cov.shape)))


class PriorBuffer:
    """Joint vectors from the current and previous iteration, capped in size."""

    def __init__(self, capacity):
        self.capacity = int(capacity)
        self._chunks = []

    def push(self, vectors):
        self._chunks = (self._chunks + [np.asarray(vectors, dtype=float)])[-2:]

    def data(self):
        Z = np.concatenate(self._chunks)
        return Z[-self.capacity:]

    def __len__(self):
        return sum(len(c) for c in self._chunks)
