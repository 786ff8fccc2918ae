"""The global policy N(mu(x), Sigma) and its supervised projection onto local controllers.

The projection ("S-step") minimizes, over every stored state x_j with local
target mean m_j and local precision P_j,

    sum_j  tr(P_j Sigma) - log|Sigma| + (mu(x_j) - m_j)^T P_j (mu(x_j) - m_j),

which equals twice the summed KL(pi(.|x_j) || p(.|x_j)) minus the constant
sum_j (log|C_j| - du). Sigma is set in closed form; the mean parameters are
trained by mini-batch SGD with momentum, or solved exactly for affine policies.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, NumericalError
from .trajdist import TimeVaryingLinGauss

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
COV_FLOOR = 1e-6
ARCHITECTURES = ("affine", "mlp")


class CheckpointVersionError(InvalidInputError):
    pass


def floor_eigenvalues(S, floor=COV_FLOOR):
    S = 0.5 * (S + np.swapaxes(S, -1, -2))
    w, V = np.linalg.eigh(S)
    return (V * np.maximum(w, floor)[..., None, :]) @ np.swapaxes(V, -1, -2)


def _readonly(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class GlobalPolicy:
    """Conditionally Gaussian policy with a state-independent covariance.

    ``layer_sizes`` runs from observation dimension to action dimension; an
    affine policy has no hidden layers, the network uses ReLU hidden layers.
    Parameters are stored flat, layer by layer, weight (row-major) then bias.
    The observation is ``(x[selector] - obs_shift) / obs_scale``.
    """
    arch: str
    dx: int
    layer_sizes: tuple
    params: np.ndarray
    cov: np.ndarray
    selector: tuple
    obs_shift: np.ndarray
    obs_scale: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise InvalidInputError(f"unknown architecture {self.arch!r}")
        sizes = tuple(int(s) for s in self.layer_sizes)
        if self.arch == "affine" and len(sizes) != 2:
            raise InvalidInputError("affine policy takes layer_sizes (d_obs, du)")
        sel = tuple(int(i) for i in self.selector)
        if len(sel) != sizes[0] or any(not 0 <= i < self.dx for i in sel):
            raise InvalidInputError("observation selector does not match input layer")
        n_params = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
        params = _readonly(self.params).ravel()
        if params.size != n_params:
            raise InvalidInputError(f"expected {n_params} parameters, got {params.size}")
        cov = _readonly(self.cov)
        du = sizes[-1]
        if cov.shape != (du, du) or not np.allclose(cov, cov.T, atol=1e-10) \
                or np.linalg.eigvalsh(cov).min() < COV_FLOOR * (1 - 1e-9):
            raise InvalidInputError("policy covariance must be symmetric with eigenvalues >= 1e-6")
        shift = _readonly(np.broadcast_to(self.obs_shift, (sizes[0],)))
        scale = _readonly(np.broadcast_to(self.obs_scale, (sizes[0],)))
        if not (scale > 0).all():
            raise InvalidInputError("observation scale must be positive")
        for name, val in (("layer_sizes", sizes), ("selector", sel), ("params", params),
                          ("cov", cov), ("obs_shift", shift), ("obs_scale", scale)):
            object.__setattr__(self, name, val)

    @classmethod
    def affine(cls, dx, du, W=None, b=None, cov=1.0, selector=None):
        selector = tuple(range(dx)) if selector is None else tuple(selector)
        d = len(selector)
        W = np.zeros((du, d)) if W is None else np.asarray(W, float).reshape(du, d)
        b = np.zeros(du) if b is None else np.asarray(b, float).reshape(du)
        return cls("affine", dx, (d, du), np.concatenate([W.ravel(), b]), _as_cov(cov, du),
                   selector, np.zeros(d), np.ones(d))

    @classmethod
    def mlp(cls, dx, du, hidden=(40, 40), cov=1.0, selector=None, rng=None):
        """ReLU network with fan-in uniform init and a zero output layer (initial mean is 0)."""
        rng = np.random.default_rng(0) if rng is None else rng
        selector = tuple(range(dx)) if selector is None else tuple(selector)
        sizes = (len(selector), *hidden, du)
        chunks = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            if i == len(sizes) - 2:
                W = np.zeros((n_out, n_in))
            else:
                lim = 1.0 / math.sqrt(n_in)
                W = rng.uniform(-lim, lim, size=(n_out, n_in))
            chunks += [W.ravel(), np.zeros(n_out)]
        d = sizes[0]
        return cls("mlp", dx, sizes, np.concatenate(chunks), _as_cov(cov, du), selector,
                   np.zeros(d), np.ones(d))

    @property
    def du(self):
        return self.layer_sizes[-1]

    @property
    def d_obs(self):
        return self.layer_sizes[0]

    def layers(self, params=None):
        params = self.params if params is None else params
        out, i = [], 0
        for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            W = params[i:i + n_in * n_out].reshape(n_out, n_in)
            i += n_in * n_out
            out.append((W, params[i:i + n_out]))
            i += n_out
        return out

    def observe(self, X):
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.dx:
            raise InvalidInputError(f"state dimension {X.shape[-1]} != {self.dx}")
        return (X[..., list(self.selector)] - self.obs_shift) / self.obs_scale

    def mean(self, X, params=None):
        """Mean action for one state (dx,) or a batch (n, dx)."""
        X = np.asarray(X, dtype=float)
        Z = self.observe(np.atleast_2d(X))
        out = _forward(self.layers(params), Z)[0]
        return out[0] if X.ndim == 1 else out

    def with_params(self, params):
        return replace(self, params=params)

    def with_cov(self, cov):
        return replace(self, cov=cov)

    def as_affine_maps(self):
        """(W, b) acting on the full state, for affine policies."""
        if self.arch != "affine":
            raise InvalidInputError("only affine policies have a global linear form")
        (W_obs, b), = self.layers()
        W = np.zeros((self.du, self.dx))
        W[:, list(self.selector)] = W_obs / self.obs_scale
        return W, b - W_obs @ (self.obs_shift / self.obs_scale)

    def as_lin_gauss(self, T):
        """The affine policy as a time-invariant TimeVaryingLinGauss."""
        W, b = self.as_affine_maps()
        return TimeVaryingLinGauss.time_invariant(W, b, self.cov, T)


def _as_cov(cov, du):
    cov = np.asarray(cov, dtype=float)
    return cov * np.eye(du) if cov.ndim == 0 else cov


def policy_eval(policy, x):
    """Mean action and covariance of the policy at state x."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise InvalidInputError("policy_eval takes a single state vector")
    return policy.mean(x), policy.cov


def _forward(layers, Z):
    acts = [Z]
    h = Z
    for i, (W, b) in enumerate(layers):
        h = h @ W.T + b
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0)
            acts.append(h)
    return h, acts


def _backward(layers, acts, dout):
    grads = []
    delta = dout
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        a = acts[i]
        grads.append((delta.sum(axis=0), (delta.T @ a).ravel()))
        if i > 0:
            delta = (delta @ W) * (a > 0)
    flat = []
    for gb, gW in reversed(grads):
        flat += [gW, gb]
    return np.concatenate(flat)


# ---------------------------------------------------------------- dataset


@dataclass(frozen=True, eq=False)
class SStepDataset:
    """Tuples (x_j, target mean m_j, target precision P_j) for the S-step."""
    states: np.ndarray
    target_means: np.ndarray
    precisions: np.ndarray

    def __post_init__(self):
        X = _readonly(self.states)
        m = _readonly(self.target_means)
        P = _readonly(self.precisions)
        if X.ndim != 2 or m.ndim != 2 or P.ndim != 3 or not len(X) == len(m) == len(P):
            raise InvalidInputError("dataset arrays must be (M,dx), (M,du), (M,du,du)")
        if len(X) == 0:
            raise InvalidInputError("S-step dataset is empty")
        if P.shape[1:] != (m.shape[1], m.shape[1]):
            raise InvalidInputError("precision shape does not match action dimension")
        if not np.allclose(P, np.swapaxes(P, 1, 2), atol=1e-8 * (1 + np.abs(P).max())):
            raise InvalidInputError("target precisions must be symmetric")
        try:
            np.linalg.cholesky(P)
        except np.linalg.LinAlgError:
            raise InvalidInputError("target precisions must be positive definite") from None
        object.__setattr__(self, "states", X)
        object.__setattr__(self, "target_means", m)
        object.__setattr__(self, "precisions", P)

    def __len__(self):
        return len(self.states)

    @classmethod
    def from_controllers(cls, states, controllers):
        """Build tuples from per-condition state arrays (n_i, T, dx) and local controllers."""
        Xs, ms, Ps = [], [], []
        for X, ctrl in zip(states, controllers):
            X = np.asarray(X, dtype=float)
            n, T, _ = X.shape
            if T != ctrl.T:
                raise InvalidInputError("sample horizon does not match controller")
            m = np.einsum("tij,ntj->nti", ctrl.K, X) + ctrl.k
            Xs.append(X.reshape(n * T, -1))
            ms.append(m.reshape(n * T, -1))
            Ps.append(np.broadcast_to(ctrl.precision, (n, *ctrl.precision.shape)).reshape(
                n * T, ctrl.dim_out, ctrl.dim_out))
        return cls(np.concatenate(Xs), np.concatenate(ms), np.concatenate(Ps))


# ---------------------------------------------------------------- loss


def optimal_covariance(precisions):
    """Closed-form covariance minimizing sum_j tr(P_j Sigma) - M log|Sigma|."""
    P = np.asarray(precisions, dtype=float)
    if P.ndim != 3 or len(P) == 0:
        raise InvalidInputError("need a nonempty stack of precision matrices")
    try:
        np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        raise InvalidInputError("precisions must be positive definite") from None
    return floor_eigenvalues(np.linalg.inv(P.mean(axis=0)))


def _check_compatible(policy, data):
    if data.states.shape[1] != policy.dx or data.target_means.shape[1] != policy.du:
        raise InvalidInputError("dataset dimensions do not match the policy")


def _covariance_term(policy, precisions):
    _, logdet = np.linalg.slogdet(policy.cov)
    return float(np.einsum("nij,ji->", precisions, policy.cov) - len(precisions) * logdet)


def _mean_term(policy, params, Z, m, P):
    out, acts = _forward(policy.layers(params), Z)
    r = out - m
    Pr = np.einsum("nij,nj->ni", P, r)
    return float(np.sum(r * Pr)), acts, Pr


def s_step_loss(policy, dataset):
    _check_compatible(policy, dataset)
    Z = policy.observe(dataset.states)
    mean_part, _, _ = _mean_term(policy, policy.params, Z, dataset.target_means, dataset.precisions)
    return _covariance_term(policy, dataset.precisions) + mean_part


def s_step_loss_grad(policy, dataset, params=None):
    """Loss and its gradient with respect to the flat mean parameters."""
    _check_compatible(policy, dataset)
    params = policy.params if params is None else params
    Z = policy.observe(dataset.states)
    mean_part, acts, Pr = _mean_term(policy, params, Z, dataset.target_means, dataset.precisions)
    grad = _backward(policy.layers(params), acts, 2.0 * Pr)
    return _covariance_term(policy, dataset.precisions) + mean_part, grad


@dataclass(frozen=True)
class SGDConfig:
    batch_size: int = 32
    n_steps: int = 2000
    learning_rate: float = 1e-3
    momentum: float = 0.9
    seed: int = 0


def _batches(rng, n, batch_size):
    while True:
        perm = rng.permutation(n)
        for i in range(0, n, batch_size):
            yield perm[i:i + batch_size]


def _run_sgd(policy, Z, m, P, cfg, lr, grad_scale):
    rng = np.random.default_rng(cfg.seed)
    theta = policy.params.copy()
    velocity = np.zeros_like(theta)
    layers_of = policy.layers
    batches = _batches(rng, len(Z), cfg.batch_size)
    for _ in range(cfg.n_steps):
        idx = next(batches)
        out, acts = _forward(layers_of(theta), Z[idx])
        Pr = np.einsum("nij,nj->ni", P[idx], out - m[idx])
        g = _backward(layers_of(theta), acts, (2.0 * grad_scale / len(idx)) * Pr)
        if not np.isfinite(g).all():
            return None
        velocity = cfg.momentum * velocity - lr * g
        theta = theta + velocity
    return theta if np.isfinite(theta).all() else None


def s_step_train(policy, dataset, cfg=SGDConfig()):
    """Project local controllers onto the policy class.

    Returns ``(trained_policy, final_loss)``. The covariance is set once in
    closed form; mean parameters follow mini-batch SGD with momentum. The
    gradient is divided by the mean precision trace per action dimension,
    a constant rescaling that leaves the minimizer unchanged but keeps the
    step size meaningful across tasks whose controllers differ in scale.
    A network policy fixes its input normalization from the first dataset
    it sees. If SGD ends worse than it started, the starting mean is kept.
    """
    _check_compatible(policy, dataset)
    initial_loss = s_step_loss(policy, dataset)
    if cfg.n_steps == 0:
        return policy, initial_loss
    if policy.arch == "mlp" and not policy.normalized:
        obs = dataset.states[:, list(policy.selector)]
        policy = replace(policy, obs_shift=obs.mean(axis=0),
                         obs_scale=np.maximum(obs.std(axis=0), 1e-3), normalized=True)
    policy = policy.with_cov(optimal_covariance(dataset.precisions))
    Z = policy.observe(dataset.states)
    m, P = dataset.target_means, dataset.precisions
    grad_scale = policy.du / float(np.einsum("nii->", P) / len(P))
    lr = cfg.learning_rate
    theta = _run_sgd(policy, Z, m, P, cfg, lr, grad_scale)
    if theta is None:
        log.warning("S-step diverged; restarting with learning rate %g", lr / 2)
        theta = _run_sgd(policy, Z, m, P, cfg, lr / 2, grad_scale)
        if theta is None:
            raise NumericalError("S-step diverged twice")
    start = s_step_loss(policy, dataset)
    trained = policy.with_params(theta)
    loss = s_step_loss(trained, dataset)
    if not loss <= start:
        trained, loss = policy, start
    return trained, loss


# ------------------------------------------------------ exact affine projection


def _solve_affine(Ms, Rs, Ps):
    """argmin_A sum_j tr(P_j A M_j A^T) - 2 tr(P_j A R_j^T).

    M_j = E[z z^T], R_j = E[m z^T] with z = [x; 1]; uses
    vec(P A M) = (M kron P) vec(A) in column-major vec.
    """
    du, nz = Rs.shape[1:]
    lhs = np.einsum("nab,nij->bjai", Ms, Ps).reshape(nz * du, nz * du)
    rhs = np.einsum("nij,njb->bi", Ps, Rs).reshape(-1)
    vecA = np.linalg.solve(0.5 * (lhs + lhs.T), rhs)
    return vecA.reshape(nz, du).T


def _affine_from_solution(policy, A):
    d = policy.d_obs
    W_full, b = A[:, :d], A[:, d]
    # fold normalization back so that mean(x) = W_full x_sel + b
    W = W_full * policy.obs_scale
    b = b + W_full @ policy.obs_shift
    return np.concatenate([W.ravel(), b])


def fit_affine_exact(policy, dataset):
    """Exact S-step for an affine policy: weighted least squares plus the closed-form covariance."""
    if policy.arch != "affine":
        raise InvalidInputError("exact projection needs an affine policy")
    _check_compatible(policy, dataset)
    Xs = dataset.states[:, list(policy.selector)]
    z = np.concatenate([Xs, np.ones((len(Xs), 1))], axis=1)
    Ms = z[:, :, None] * z[:, None, :]
    Rs = dataset.target_means[:, :, None] * z[:, None, :]
    A = _solve_affine(Ms, Rs, dataset.precisions)
    trained = policy.with_params(_affine_from_solution(policy, A)).with_cov(
        optimal_covariance(dataset.precisions))
    return trained, s_step_loss(trained, dataset)


def project_affine_moments(policy, marginals, controllers, weights=None):
    """Exact S-step in expectation: states distributed per each controller's marginals.

    Minimizes sum_i sum_t E_{p_i(x_t)}[2 KL(pi(.|x_t) || p_i(.|x_t))] over affine
    policies, with no sampling error. ``marginals`` are GaussianMarginals of
    each controller under its own dynamics.
    """
    if policy.arch != "affine":
        raise InvalidInputError("exact projection needs an affine policy")
    sel = list(policy.selector)
    Ms, Rs, Ps = [], [], []
    weights = np.ones(len(controllers)) if weights is None else np.asarray(weights, float)
    for w, marg, ctrl in zip(weights, marginals, controllers):
        mu, S = marg.state_mean[:, sel], marg.state_cov[:, sel][:, :, sel]
        T, d = mu.shape
        M = np.empty((T, d + 1, d + 1))
        M[:, :d, :d] = S + mu[:, :, None] * mu[:, None, :]
        M[:, :d, d] = M[:, d, :d] = mu
        M[:, d, d] = 1.0
        # E[(K x + k) z^T] needs cross moments of the full state with z
        mu_full, S_full = marg.state_mean, marg.state_cov
        Ex_z = np.concatenate([S_full[:, :, sel] + mu_full[:, :, None] * mu[:, None, :],
                               mu_full[:, :, None]], axis=2)
        R = np.einsum("tij,tjb->tib", ctrl.K, Ex_z) + ctrl.k[:, :, None] * np.concatenate(
            [mu, np.ones((T, 1))], axis=1)[:, None, :]
        Ms.append(w * M)
        Rs.append(w * R)
        Ps.append(ctrl.precision)
    P_all = np.concatenate(Ps)
    A = _solve_affine(np.concatenate(Ms), np.concatenate(Rs), P_all)
    cov = optimal_covariance(np.concatenate([w * P for w, P in zip(weights, Ps)]) / weights.mean())
    return policy.with_params(_affine_from_solution(policy, A)).with_cov(cov)


# ---------------------------------------------------------------- checkpoints


def policy_to_dict(policy):
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "architecture": {"kind": policy.arch, "layer_sizes": list(policy.layer_sizes),
                         "activation": "relu" if policy.arch == "mlp" else None,
                         "layout": "per layer: weight (out x in, row-major), then bias"},
        "state_dim": policy.dx,
        "params": policy.params.tolist(),
        "covariance": policy.cov.tolist(),
        "selector": list(policy.selector),
        "obs_shift": policy.obs_shift.tolist(),
        "obs_scale": policy.obs_scale.tolist(),
        "normalized": policy.normalized,
    }


def policy_from_dict(doc):
    version = doc.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version!r} is not supported "
            f"(this build reads version {CHECKPOINT_FORMAT_VERSION})")
    arch = doc["architecture"]
    return GlobalPolicy(arch["kind"], doc["state_dim"], tuple(arch["layer_sizes"]),
                        np.array(doc["params"], dtype=np.float64),
                        np.array(doc["covariance"], dtype=np.float64), tuple(doc["selector"]),
                        np.array(doc["obs_shift"]), np.array(doc["obs_scale"]),
                        bool(doc["normalized"]))


def save_checkpoint(policy, path, **extra):
    doc = policy_to_dict(policy)
    doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=1))


def load_checkpoint(path):
    doc = json.loads(Path(path).read_text())
    return policy_from_dict(doc), doc
