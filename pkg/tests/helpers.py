"""Shared random-instance builders and Monte-Carlo oracles for the test suite.

The oracles here deliberately avoid the library's own closed forms: they
simulate trajectories and evaluate Gaussian log densities from scratch.
"""
import numpy as np

from mdgps.trajdist import TimeVaryingLinGauss


def random_spd(rng, n, scale=1.0, floor=0.2):
    A = rng.normal(size=(n, n))
    return scale * (A @ A.T / n + floor * np.eye(n))


def random_controller(rng, T, dx, du, gain=0.5, bias=1.0, noise=1.0):
    K = gain * rng.normal(size=(T, du, dx))
    k = bias * rng.normal(size=(T, du))
    C = np.stack([random_spd(rng, du, noise) for _ in range(T)])
    return TimeVaryingLinGauss(K, k, C)


def random_dynamics(rng, T, dx, du, noise=0.1):
    fx = np.stack([0.9 * np.linalg.qr(rng.normal(size=(dx, dx)))[0] for _ in range(T)])
    fu = 0.5 * rng.normal(size=(T, dx, du))
    fc = 0.1 * rng.normal(size=(T, dx))
    F = np.stack([random_spd(rng, dx, noise) for _ in range(T)])
    return TimeVaryingLinGauss.from_dynamics(fx, fu, fc, F)


def gauss_logpdf(x, mean, cov):
    """Batched log N(x; mean, cov) for x, mean of shape (n, d)."""
    d = x.shape[-1]
    L = np.linalg.cholesky(cov)
    w = np.linalg.solve(L, (x - mean).T).T
    return -0.5 * np.sum(w * w, axis=-1) - np.log(np.diag(L)).sum() - 0.5 * d * np.log(2 * np.pi)


def simulate(ctrl, dyn, init_mean, init_cov, n, rng):
    """Vectorized rollouts; returns states (n, T, dx) and actions (n, T, du)."""
    T, dx, du = ctrl.T, ctrl.dim_in, ctrl.dim_out
    X = np.empty((n, T, dx))
    U = np.empty((n, T, du))
    x = rng.multivariate_normal(init_mean, init_cov, size=n)
    for t in range(T):
        u = x @ ctrl.K[t].T + ctrl.k[t] + rng.multivariate_normal(np.zeros(du), ctrl.cov[t], size=n)
        X[:, t], U[:, t] = x, u
        if t < T - 1:
            z = np.concatenate([x, u], axis=1)
            x = z @ dyn.K[t].T + dyn.k[t] + rng.multivariate_normal(np.zeros(dx), dyn.cov[t], size=n)
    return X, U


def traj_logpdf(ctrl, dyn, init_mean, init_cov, X, U):
    """Full log p(tau) including initial-state and dynamics terms."""
    T = ctrl.T
    lp = gauss_logpdf(X[:, 0], init_mean, init_cov)
    for t in range(T):
        lp += gauss_logpdf(U[:, t], X[:, t] @ ctrl.K[t].T + ctrl.k[t], ctrl.cov[t])
        if t < T - 1:
            z = np.concatenate([X[:, t], U[:, t]], axis=1)
            lp += gauss_logpdf(X[:, t + 1], z @ dyn.K[t].T + dyn.k[t], dyn.cov[t])
    return lp


def moment_zscores(samples, mean, cov):
    """Standardized errors of the empirical mean and covariance of ``samples`` (n, d)."""
    n = samples.shape[0]
    emp_mean = samples.mean(axis=0)
    c = samples - emp_mean
    z_mean = (emp_mean - mean) / (c.std(axis=0) / np.sqrt(n))
    prods = c[:, :, None] * c[:, None, :]
    emp_cov = prods.mean(axis=0)
    se_cov = prods.std(axis=0) / np.sqrt(n)
    z_cov = (emp_cov - cov) / np.maximum(se_cov, 1e-300)
    return z_mean, z_cov


# ---------------------------------------------------------------- tabular MDPs


def tabular_instance(rng):
    S, A, T = rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 5)
    init = rng.dirichlet(np.ones(S))
    P = rng.dirichlet(np.ones(S), size=(T, S, A))
    p = rng.dirichlet(np.ones(A), size=(T, S))
    # some instances get a global policy close to the local one
    mix = rng.uniform(0.0, 1.0) if rng.uniform() < 0.5 else 1.0
    q = (1 - mix) * p + mix * rng.dirichlet(np.ones(A), size=(T, S))
    cost = rng.uniform(0.0, 3.0, size=(T, S, A))
    return init, P, p, q, cost


def tabular_marginals(init, P, pol):
    ms = [init]
    for t in range(len(P) - 1):
        ms.append(np.einsum("s,sa,sab->b", ms[-1], pol[t], P[t]))
    return ms


def enumerate_cost(init, P, pol, cost):
    """Expected cost by summing over every state-action sequence."""
    T, S, A = cost.shape
    total = 0.0

    def rec(t, s, prob, acc):
        nonlocal total
        for a in range(A):
            pa = prob * pol[t][s, a]
            c = acc + cost[t, s, a]
            if t == T - 1:
                total += pa * c
            else:
                for s2 in range(S):
                    rec(t + 1, s2, pa * P[t][s, a, s2], c)

    for s in range(S):
        rec(0, s, init[s], 0.0)
    return total
