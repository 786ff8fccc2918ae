"""Small simulated control tasks with analytic cost derivatives.

point-mass  state [p - target (2), v (2)], action = acceleration; exact
            double integrator, optional round obstacles entering the cost as
            a squared-softplus penetration penalty.
reacher     planar two-link arm, state [q (2), dq (2), ee - target (2)],
            action = joint torques, RK4 integration. The blind variant hides
            the target-relative coordinates from the global policy.

All cost and geometry constants are task choices, not physical facts.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.special import expit

from .errors import InvalidInputError, NumericalError
from .policy import GlobalPolicy
from .trajdist import QuadraticCostExpansion, TimeVaryingLinGauss


class SimulationError(NumericalError):
    def __init__(self, message, trajectory=None, step=None):
        super().__init__(message, step)
        self.trajectory = trajectory


# ---------------------------------------------------------------- costs


@dataclass(frozen=True)
class Obstacle:
    center: tuple          # in the same (target-relative) coordinates as the position
    radius: float
    weight: float = 50.0
    sharpness: float = 5.0
    smoothing: float = 1e-3


def _softplus(z):
    return np.logaddexp(0.0, z)


@dataclass(frozen=True, eq=False)
class TrajectoryCost:
    """l_t(x, u) = 1/2 sum_i w_t,i x_i^2 + 1/2 r |u|^2 + obstacle penalties on x[pos_idx].

    An obstacle contributes (w / b^2) softplus(b (radius - d))^2 with
    d = sqrt(|p - c|^2 + s^2), smooth everywhere and vanishing far away.
    """
    state_weights: np.ndarray      # (T, dx)
    action_weight: float
    pos_idx: tuple = (0, 1)
    obstacles: tuple = ()

    @property
    def T(self):
        return self.state_weights.shape[0]

    def _obstacle_terms(self, P, obs):
        diff = P - np.asarray(obs.center)
        d = np.sqrt(np.sum(diff ** 2, axis=-1) + obs.smoothing ** 2)
        z = obs.sharpness * (obs.radius - d)
        return diff, d, z

    def value(self, X, U):
        """Per-step costs for arrays (..., T, dx) and (..., T, du)."""
        cost = 0.5 * np.sum(self.state_weights * X ** 2, axis=-1) \
            + 0.5 * self.action_weight * np.sum(U ** 2, axis=-1)
        P = X[..., list(self.pos_idx)]
        for obs in self.obstacles:
            _, _, z = self._obstacle_terms(P, obs)
            cost = cost + obs.weight * (_softplus(z) / obs.sharpness) ** 2
        return cost

    def derivatives(self, X, U, gauss_newton=False):
        """Gradients and Hessians along one trajectory X (T, dx), U (T, du).

        With ``gauss_newton`` the obstacle Hessian keeps only the outer product
        of the penalty residual's gradient, so the expansion of each penalty is
        a square and never goes negative.
        """
        T, dx = X.shape
        du = U.shape[1]
        lx = self.state_weights * X
        lxx = np.einsum("ti,ij->tij", self.state_weights, np.eye(dx))
        lu = self.action_weight * U
        luu = np.broadcast_to(self.action_weight * np.eye(du), (T, du, du)).copy()
        lux = np.zeros((T, du, dx))
        idx = list(self.pos_idx)
        P = X[:, idx]
        for obs in self.obstacles:
            diff, d, z = self._obstacle_terms(P, obs)
            sp, sg = _softplus(z), expit(z)
            b = obs.sharpness
            g1 = 2.0 * obs.weight * sp * sg / b            # d penalty / d s
            g2 = 2.0 * obs.weight * (sg ** 2 + sp * sg * (1.0 - sg))
            ds = -diff / d[:, None]                        # d s / d p, with s = radius - d
            n = diff / d[:, None]
            d2s = -(np.eye(2)[None] - n[:, :, None] * n[:, None, :]) / d[:, None, None]
            lx[:, idx] += g1[:, None] * ds
            if gauss_newton:
                H = (2.0 * obs.weight * sg ** 2)[:, None, None] * ds[:, :, None] * ds[:, None, :]
            else:
                H = g2[:, None, None] * ds[:, :, None] * ds[:, None, :] + g1[:, None, None] * d2s
            lxx[:, np.array(idx)[:, None], np.array(idx)[None, :]] += H
        return lx, lu, lxx, luu, lux


def cost_expand(spec, X, U, curvature="gauss_newton"):
    """Quadratic expansion of the task cost about the trajectory (X, U).

    ``curvature="exact"`` gives the second-order Taylor expansion. The default
    Gauss-Newton curvature keeps the expansion nonnegative, which the analytic
    cost comparisons and the cost bound rely on.
    """
    if curvature not in ("exact", "gauss_newton"):
        raise InvalidInputError(f"unknown curvature {curvature!r}")
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    if X.shape != (spec.T, spec.dx) or U.shape != (spec.T, spec.du):
        raise InvalidInputError("trajectory does not match the task dimensions")
    lx, lu, lxx, luu, lux = spec.cost.derivatives(X, U, curvature == "gauss_newton")
    return QuadraticCostExpansion.from_blocks(lxx, luu, lux, lx, lu, spec.cost.value(X, U), X, U)


def average_expansion(expansions):
    """Average of expansions, converted to a common expansion point (their mean)."""
    z_hat = np.mean([e.z_hat for e in expansions], axis=0)
    parts = [e.recentered(z_hat) for e in expansions]
    n = len(parts)
    return QuadraticCostExpansion(sum(p.H for p in parts) / n, sum(p.g for p in parts) / n,
                                  sum(p.c for p in parts) / n, z_hat, parts[0].dx)


# ---------------------------------------------------------------- dynamics


def point_mass_step(dt):
    def step(X, U):
        p, v = X[..., :2], X[..., 2:4]
        return np.concatenate([p + dt * v + 0.5 * dt * dt * U, v + dt * U], axis=-1)
    return step


def point_mass_matrices(dt):
    fx = np.eye(4)
    fx[:2, 2:] = dt * np.eye(2)
    fu = np.vstack([0.5 * dt * dt * np.eye(2), dt * np.eye(2)])
    return fx, fu


@dataclass(frozen=True)
class ArmParams:
    lengths: tuple = (0.5, 0.5)
    masses: tuple = (1.0, 1.0)
    damping: float = 0.5
    substeps: int = 2


def arm_forward_kinematics(q, arm):
    l1, l2 = arm.lengths
    q1, q12 = q[..., 0], q[..., 0] + q[..., 1]
    return np.stack([l1 * np.cos(q1) + l2 * np.cos(q12), l1 * np.sin(q1) + l2 * np.sin(q12)],
                    axis=-1)


def arm_accel(q, dq, tau, arm):
    """Joint accelerations of a planar arm with point masses at the link ends."""
    (l1, l2), (m1, m2) = arm.lengths, arm.masses
    c2, s2 = np.cos(q[..., 1]), np.sin(q[..., 1])
    a = (m1 + m2) * l1 ** 2 + m2 * l2 ** 2 + 2 * m2 * l1 * l2 * c2
    b = m2 * l2 ** 2 + m2 * l1 * l2 * c2
    d = m2 * l2 ** 2
    h = m2 * l1 * l2 * s2
    dq1, dq2 = dq[..., 0], dq[..., 1]
    r1 = tau[..., 0] + h * (2 * dq1 * dq2 + dq2 ** 2) - arm.damping * dq1
    r2 = tau[..., 1] - h * dq1 ** 2 - arm.damping * dq2
    det = a * d - b * b
    return np.stack([(d * r1 - b * r2) / det, (a * r2 - b * r1) / det], axis=-1)


def arm_step(dt, arm, target):
    target = np.asarray(target, dtype=float)

    def deriv(s, tau):
        return np.concatenate([s[..., 2:], arm_accel(s[..., :2], s[..., 2:], tau, arm)], axis=-1)

    def step(X, U):
        s = X[..., :4]
        h = dt / arm.substeps
        for _ in range(arm.substeps):
            k1 = deriv(s, U)
            k2 = deriv(s + 0.5 * h * k1, U)
            k3 = deriv(s + 0.5 * h * k2, U)
            k4 = deriv(s + h * k3, U)
            s = s + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        return np.concatenate([s, arm_forward_kinematics(s[..., :2], arm) - target], axis=-1)
    return step


# ---------------------------------------------------------------- tasks


@dataclass(frozen=True, eq=False)
class EnvSpec:
    """A task: dynamics, cost, initial conditions and the global policy's view.

    ``steppers[i]`` is the deterministic map for condition i (conditions may
    differ in target); process noise N(0, sigma_dyn^2) is added to the
    coordinates in ``noise_idx``, after which ``finalize`` (when set)
    recomputes derived coordinates such as the end-effector position.
    """
    name: str
    dx: int
    du: int
    T: int
    dt: float
    init_states: np.ndarray
    steppers: tuple
    cost: TrajectoryCost
    selector: tuple
    success_idx: tuple
    success_threshold: float
    sigma_dyn: float = 1e-3
    init_std: float = 1e-2
    noise_idx: tuple = ()
    policy_std: float = 1.0
    linear: Callable | None = None
    finalize: Callable | None = None
    info: dict = field(default_factory=dict)

    @property
    def n_conditions(self):
        return len(self.init_states)

    def with_conditions(self, n):
        """The task restricted to its first ``n`` initial conditions."""
        if not 0 < n <= self.n_conditions:
            raise InvalidInputError(
                f"task {self.name!r} has {self.n_conditions} conditions, {n} requested")
        return replace(self, init_states=self.init_states[:n], steppers=self.steppers[:n])

    def init_distribution(self, condition):
        mean = self.init_states[condition].copy()
        cov = np.zeros((self.dx, self.dx))
        idx = list(self.noise_idx)
        cov[np.ix_(idx, idx)] = self.init_std ** 2 * np.eye(len(idx))
        return mean, cov + 1e-10 * np.eye(self.dx)

    def linear_dynamics(self, condition=0):
        """Exact dynamics as TimeVaryingLinGauss (only for linear tasks)."""
        if self.linear is None:
            raise InvalidInputError(f"task {self.name!r} has nonlinear dynamics")
        fx, fu = self.linear()
        n = self.T - 1
        F = np.zeros((self.dx, self.dx))
        idx = list(self.noise_idx)
        F[np.ix_(idx, idx)] = self.sigma_dyn ** 2 * np.eye(len(idx))
        return TimeVaryingLinGauss.from_dynamics(np.broadcast_to(fx, (n, *fx.shape)),
                                                 np.broadcast_to(fu, (n, *fu.shape)),
                                                 np.zeros((n, self.dx)),
                                                 np.broadcast_to(F + 1e-12 * np.eye(self.dx),
                                                                 (n, self.dx, self.dx)))

    def initial_policy(self, arch="mlp", hidden=(40, 40), rng=None):
        if arch == "affine":
            return GlobalPolicy.affine(self.dx, self.du, cov=self.policy_std ** 2,
                                       selector=self.selector)
        return GlobalPolicy.mlp(self.dx, self.du, hidden, cov=self.policy_std ** 2,
                                selector=self.selector, rng=rng)


def env_step(spec, x, u, noise=None, condition=0):
    """One transition; ``noise`` is a standard-normal draw scaled by sigma_dyn."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape[-1] != spec.dx or u.shape[-1] != spec.du:
        raise InvalidInputError("state or action dimension does not match the task")
    x_next = spec.steppers[condition](x, u)
    if noise is not None:
        idx = list(spec.noise_idx)
        x_next = x_next.copy()
        x_next[..., idx] += spec.sigma_dyn * np.asarray(noise)[..., idx]
        if spec.finalize is not None:
            x_next = spec.finalize(x_next, condition)
    if not np.isfinite(x_next).all():
        raise SimulationError("non-finite state", trajectory=np.stack([x, x_next]))
    return x_next


def point_mass(T=100, dt=0.05, obstacles=None, starts=None, sigma_dyn=1e-3, init_std=1e-2,
               action_weight=1e-2, run_weight=0.0, final_weight=100.0, final_vel_weight=10.0,
               policy_std=1.0, success_threshold=0.1):
    """Point mass driven to the origin (the target) from N start positions.

    Default geometry: starts at (2, y), y in {-1, -0.5, 0, 0.5, 1}; one obstacle
    of radius 0.35 centred at (1, 0.1), between the starts and the target.
    """
    starts = np.array([(2.0, y) for y in (-1.0, -0.5, 0.0, 0.5, 1.0)] if starts is None
                      else starts, dtype=float)
    init = np.concatenate([starts, np.zeros_like(starts)], axis=1)
    w = np.zeros((T, 4))
    w[:, :2] = run_weight
    w[-1] = [final_weight, final_weight, final_vel_weight, final_vel_weight]
    obs = (Obstacle(center=(1.0, 0.1), radius=0.35),) if obstacles is None else tuple(obstacles)
    cost = TrajectoryCost(w, action_weight, (0, 1), obs)
    step = point_mass_step(dt)
    return EnvSpec("pointmass" if obs else "pointmass_lq", 4, 2, T, dt, init,
                   (step,) * len(init), cost, (0, 1, 2, 3), (0, 1), success_threshold,
                   sigma_dyn, init_std, (0, 1, 2, 3), policy_std,
                   linear=lambda: point_mass_matrices(dt))


REACHER_START = (-0.4, 1.6)
REACHER_TARGET_JOINTS = (0.9, 1.1)


def reacher(T=100, dt=0.05, blind=False, spread=0.025, arm=ArmParams(), sigma_dyn=1e-3,
            init_std=1e-2, action_weight=1e-2, run_weight=1.0, final_weight=200.0,
            final_vel_weight=1.0, policy_std=1.0, success_threshold=0.06):
    """Two-link arm reaching one of four targets from a shared start pose.

    Targets sit at the corners of a square of half-width ``spread`` around the
    end-effector position of REACHER_TARGET_JOINTS, so a policy that cannot see
    the target can still succeed by reaching the centre of the cluster.
    """
    centre = arm_forward_kinematics(np.array(REACHER_TARGET_JOINTS), arm)
    offsets = spread * np.array([(1, 1), (1, -1), (-1, 1), (-1, -1)], dtype=float)
    targets = centre + offsets
    q0 = np.array(REACHER_START)
    ee0 = arm_forward_kinematics(q0, arm)
    init = np.array([np.concatenate([q0, [0.0, 0.0], ee0 - tgt]) for tgt in targets])
    w = np.zeros((T, 6))
    w[:, 4:] = run_weight
    w[-1, 4:] = final_weight
    w[-1, 2:4] = final_vel_weight
    cost = TrajectoryCost(w, action_weight, (4, 5), ())
    steppers = tuple(arm_step(dt, arm, tgt) for tgt in targets)
    selector = (0, 1, 2, 3) if blind else (0, 1, 2, 3, 4, 5)

    def finalize(X, condition):
        X = X.copy()
        X[..., 4:] = arm_forward_kinematics(X[..., :2], arm) - targets[condition]
        return X

    return EnvSpec("reacher_blind" if blind else "reacher", 6, 2, T, dt, init, steppers, cost,
                   selector, (4, 5), success_threshold, sigma_dyn, init_std, (0, 1, 2, 3),
                   policy_std, finalize=finalize, info={"targets": targets, "arm": arm})


ENVIRONMENTS = {
    "pointmass": lambda **kw: point_mass(**kw),
    "pointmass_lq": lambda **kw: point_mass(obstacles=(), **kw),
    "reacher": lambda **kw: reacher(blind=False, **kw),
    "reacher_blind": lambda **kw: reacher(blind=True, **kw),
}


def make_env(name, **overrides):
    try:
        return ENVIRONMENTS[name](**overrides)
    except KeyError:
        raise InvalidInputError(
            f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None


# ---------------------------------------------------------------- rollouts


@dataclass(frozen=True, eq=False)
class Rollout:
    states: np.ndarray
    actions: np.ndarray
    costs: np.ndarray
    condition: int
    seed: int

    @property
    def total_cost(self):
        return float(self.costs.sum())

    def to_dict(self):
        return {"condition": self.condition, "seed": self.seed,
                "states": self.states.tolist(), "actions": self.actions.tolist(),
                "costs": self.costs.tolist(), "total_cost": self.total_cost}


def rollout_seed(master, iteration, condition, sample, stream=0):
    """64-bit seed for one rollout, mixed from its coordinates by numpy's SeedSequence."""
    ss = np.random.SeedSequence([int(master), int(iteration), int(condition), int(sample),
                                 int(stream)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _actor_means(actor, X, t):
    if isinstance(actor, TimeVaryingLinGauss):
        return X @ actor.K[t].T + actor.k[t]
    return actor.mean(X)


def _actor_cov_chol(actor, t):
    if isinstance(actor, TimeVaryingLinGauss):
        return actor.chol[t]
    return np.linalg.cholesky(actor.cov)


def _check_actor(spec, actor):
    if isinstance(actor, TimeVaryingLinGauss):
        if actor.dim_in != spec.dx or actor.dim_out != spec.du or actor.T < spec.T:
            raise InvalidInputError("controller does not match the task")
    elif isinstance(actor, GlobalPolicy):
        if actor.dx != spec.dx or actor.du != spec.du:
            raise InvalidInputError("policy does not match the task")
    else:
        raise InvalidInputError(f"cannot roll out a {type(actor).__name__}")


def sample_rollouts(spec, actor, condition, n_samples, seed, deterministic=False):
    """Roll out ``actor`` from condition ``condition``.

    Sample j draws its initial-state, action and process noise from
    ``rollout_seed(seed, 0, condition, j)``, so a rollout does not depend on
    how many others are drawn alongside it. ``deterministic`` uses mean actions.
    """
    _check_actor(spec, actor)
    if n_samples <= 0:
        raise InvalidInputError("need at least one rollout")
    T, dx, du = spec.T, spec.dx, spec.du
    seeds = [rollout_seed(seed, 0, condition, j) for j in range(n_samples)]
    init_noise = np.empty((n_samples, dx))
    act_noise = np.empty((n_samples, T, du))
    dyn_noise = np.empty((n_samples, T, dx))
    for j, s in enumerate(seeds):
        rng = np.random.default_rng(s)
        init_noise[j] = rng.standard_normal(dx)
        act_noise[j] = rng.standard_normal((T, du))
        dyn_noise[j] = rng.standard_normal((T, dx))
    mean0, cov0 = spec.init_distribution(condition)
    idx = list(spec.noise_idx)
    X0 = np.broadcast_to(mean0, (n_samples, dx)).copy()
    X0[:, idx] += spec.init_std * init_noise[:, idx]
    if spec.finalize is not None:
        X0 = spec.finalize(X0, condition)
    X = np.empty((n_samples, T, dx))
    U = np.empty((n_samples, T, du))
    x = X0
    for t in range(T):
        u = _actor_means(actor, x, t)
        if not deterministic:
            u = u + act_noise[:, t] @ _actor_cov_chol(actor, t).T
        X[:, t], U[:, t] = x, u
        if t < T - 1:
            try:
                x = env_step(spec, x, u, dyn_noise[:, t], condition)
            except SimulationError as exc:
                raise SimulationError(f"rollout of condition {condition} diverged",
                                      trajectory=X[:, :t + 1], step=t) from exc
    costs = spec.cost.value(X, U)
    return [Rollout(X[j], U[j], costs[j], condition, seeds[j]) for j in range(n_samples)]


def final_distances(spec, rollouts):
    if not rollouts:
        raise InvalidInputError("no rollouts to evaluate")
    return np.array([np.linalg.norm(r.states[-1, list(spec.success_idx)]) for r in rollouts])


def success_rate(spec, rollouts):
    """Fraction of rollouts whose final distance to the target is below the threshold."""
    return float(np.mean(final_distances(spec, rollouts) < spec.success_threshold))
