"""The alternating C-step / S-step loop, step-size rules and cost-bound diagnostics.

Cost bookkeeping uses six analytic expected costs per condition. With p^k the
local controller that generates the samples of iteration k (the C-step output
of iteration k-1), pi^k the global policy's linearization fitted at iteration
k, and l_m(.) the expected total cost under the dynamics and cost expansion
fitted at iteration m:

    cost_prev_pi_prev_dyn       l_{k-1}(pi^{k-1})
    cost_new_local_prev_dyn     l_{k-1}(p^k)        predicted local cost
    cost_new_local_cur_dyn      l_k(p^k)            realized local cost
    cost_new_pi_prev_dyn        l_{k-1}(pi^k)
    cost_new_pi_cur_dyn         l_k(pi^k)           realized global cost
    cost_prev_local_prev_dyn    l_{k-1}(p^{k-1})
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .envs import (average_expansion, cost_expand, final_distances, rollout_seed,
                   sample_rollouts)
from .errors import InvalidInputError, NumericalError
from .fitting import (PriorBuffer, SampleSet, dynamics_vectors, fit_gmm, fit_linear_gaussian,
                      fit_policy_linearization)
from .lqr import c_step
from .policy import SGDConfig, SStepDataset, project_affine_moments, s_step_train
from .trajdist import (LOG_2PI, TimeVaryingLinGauss, expected_cost, expected_cost_per_step,
                       propagate_marginals)

log = logging.getLogger(__name__)

SIX_COSTS = ("cost_prev_pi_prev_dyn", "cost_new_local_prev_dyn", "cost_new_local_cur_dyn",
             "cost_new_pi_prev_dyn", "cost_new_pi_cur_dyn", "cost_prev_local_prev_dyn")

STREAM_TRAIN, STREAM_EVAL_GLOBAL, STREAM_EVAL_LOCAL, STREAM_GMM, STREAM_SGD = range(5)


# ---------------------------------------------------------------- step rules


@dataclass(frozen=True)
class StepClamps:
    factor: float = 5.0
    eps_min: float = 1e-4
    eps_max: float = 10.0

    def apply(self, eps_new, eps):
        eps_new = min(max(eps_new, eps / self.factor), eps * self.factor)
        return min(max(eps_new, self.eps_min), self.eps_max)


class StepResult(NamedTuple):
    epsilon: float
    raw: float
    degenerate: bool


def _step_rule(prev_pi, predicted, realized, eps, clamps):
    # eps' = eps (predicted - prev_pi) / 2 (predicted - realized), read as the
    # minimizer of a quadratic model of cost versus step size. An exact match
    # of prediction and outcome is treated as degenerate (maximal shrink); a
    # realized cost below the prediction means non-positive curvature, so the
    # model has no interior minimum and the largest allowed step is taken.
    gap = realized - predicted
    if gap == 0 or not math.isfinite(gap) or not math.isfinite(prev_pi - predicted):
        return StepResult(clamps.apply(eps / clamps.factor, eps), math.nan, True)
    if gap < 0:
        return StepResult(clamps.apply(eps * clamps.factor, eps), math.inf, False)
    raw = eps * (prev_pi - predicted) / (2.0 * gap)
    return StepResult(clamps.apply(raw, eps), raw, False)


def adjust_step_classic(costs, eps, clamps=StepClamps()):
    """Step size from the realized cost of the new local controller."""
    return _step_rule(costs["cost_prev_pi_prev_dyn"], costs["cost_new_local_prev_dyn"],
                      costs["cost_new_local_cur_dyn"], eps, clamps)


def adjust_step_global(costs, eps, clamps=StepClamps()):
    """Step size from the realized cost of the new global policy's linearization."""
    return _step_rule(costs["cost_prev_pi_prev_dyn"], costs["cost_new_local_prev_dyn"],
                      costs["cost_new_pi_cur_dyn"], eps, clamps)


STEP_RULES = {"classic": adjust_step_classic, "global": adjust_step_global}


# ---------------------------------------------------------------- bounds


def tv_bound(eps_t):
    """Cumulative bound 2 sum_{t'<=t} sqrt(2 eps_t') on the L1 distance of state marginals.

    The bound is stated for the raw L1 distance |p - q|_1; it holds a fortiori
    for the half-L1 total variation convention.
    """
    return 2.0 * np.cumsum(np.sqrt(2.0 * np.maximum(eps_t, 0.0)))


def q_max(max_cost_t):
    """Q_max,t = sum_{t'>=t} max l_t', the largest possible cost-to-go."""
    return np.cumsum(np.asarray(max_cost_t)[::-1])[::-1]


def cost_bound_rhs(expected_cost_t, eps_t, max_cost_t):
    """sum_t [E_p l_t + sqrt(2 eps_t) max l_t + 2 sqrt(2 eps_t) Q_max,t] (costs must be >= 0)."""
    r = np.sqrt(2.0 * np.maximum(eps_t, 0.0))
    return float(np.sum(expected_cost_t + r * max_cost_t + 2.0 * r * q_max(max_cost_t)))


@dataclass(frozen=True)
class BoundReport:
    """Empirical global-policy cost bound for one condition.

    ``eps_t`` is the maximum state-conditional KL(p || pi) over the sampled
    states only, so it under-estimates the true maximum over all states and
    the reported bound is empirical rather than guaranteed.
    """
    eps_t: np.ndarray
    tv_bound_t: np.ndarray
    max_cost_t: np.ndarray
    q_max_t: np.ndarray
    expected_local_cost: float
    rhs: float
    global_cost_mc: float = math.nan

    def summary(self):
        return {"eps_max": float(self.eps_t.max()), "tv_bound_final": float(self.tv_bound_t[-1]),
                "bound_rhs": self.rhs, "global_cost_mc": self.global_cost_mc}


def _gaussian_kl_batch(m1, S1, m2, S2):
    """KL(N(m1,S1) || N(m2,S2)) for batched means (n, d) with shared covariances."""
    d = S1.shape[0]
    S2inv = np.linalg.inv(S2)
    diff = m2 - m1
    return 0.5 * (np.trace(S2inv @ S1) + np.einsum("ni,ij,nj->n", diff, S2inv, diff) - d
                  + np.linalg.slogdet(S2)[1] - np.linalg.slogdet(S1)[1])


def compute_bound(local, policy, states, step_costs, expected_cost_t, global_cost_mc=math.nan):
    """Bound the global policy's expected cost from its divergence to a local controller.

    ``states`` (n, T, dx) and ``step_costs`` (n, T) come from sampled
    trajectories; ``expected_cost_t`` is the local controller's analytic
    expected cost per step.
    """
    states = np.asarray(states, dtype=float)
    if states.size == 0 or len(states) == 0:
        raise InvalidInputError("bound needs sampled states")
    n, T, dx = states.shape
    pi_means = policy.mean(states.reshape(n * T, dx)).reshape(n, T, -1)
    eps = np.empty(T)
    for t in range(T):
        m_p = states[:, t] @ local.K[t].T + local.k[t]
        eps[t] = max(_gaussian_kl_batch(m_p, local.cov[t], pi_means[:, t], policy.cov).max(), 0.0)
    max_cost = np.asarray(step_costs).max(axis=0)
    expected_cost_t = np.asarray(expected_cost_t, dtype=float)
    return BoundReport(eps, tv_bound(eps), max_cost, q_max(max_cost),
                       float(expected_cost_t.sum()), cost_bound_rhs(expected_cost_t, eps, max_cost),
                       float(global_cost_mc))


# ---------------------------------------------------------------- loop


@dataclass(frozen=True)
class MDGPSConfig:
    n_samples: int = 5
    sampling: str = "off_policy"
    step_rule: str = "classic"
    epsilon: float = 1.0
    clamps: StepClamps = StepClamps()
    kl_tol: float = 0.05
    policy_arch: str = "mlp"
    hidden: tuple = (40, 40)
    sgd: SGDConfig = SGDConfig()
    s_step: str = "sgd"             # "sgd" | "exact" (affine only, in expectation)
    dynamics: str = "fit"           # "fit" | "exact" (linear tasks only)
    gmm_components: int = 4
    gmm_restarts: int = 2
    gmm_iters: int = 50
    dynamics_prior_strength: float = 1.0
    policy_prior_strength: float = 1.0
    prior_buffer_factor: int = 20
    linearization_targets: str = "mean"
    n_eval: int = 5
    seed: int = 0

    def __post_init__(self):
        checks = [(self.sampling in ("off_policy", "on_policy"), "sampling"),
                  (self.step_rule in STEP_RULES, "step_rule"),
                  (self.s_step in ("sgd", "exact"), "s_step"),
                  (self.dynamics in ("fit", "exact"), "dynamics"),
                  (self.policy_arch in ("affine", "mlp"), "policy_arch"),
                  (self.epsilon > 0, "epsilon"), (self.n_samples > 0, "n_samples"),
                  (self.n_eval > 0, "n_eval")]
        for ok, name in checks:
            if not ok:
                raise InvalidInputError(f"invalid value for {name}")
        if self.s_step == "exact" and self.policy_arch != "affine":
            raise InvalidInputError("the exact S-step needs an affine policy")


@dataclass
class ConditionState:
    epsilon: float
    local: TimeVaryingLinGauss
    eta: float | None = None
    dyn_buffer: PriorBuffer | None = None
    # what iteration k-1 left behind for the step-size bookkeeping
    prev_dyn: TimeVaryingLinGauss | None = None
    prev_cost: object = None
    prev_pi: TimeVaryingLinGauss | None = None
    prev_local: TimeVaryingLinGauss | None = None


@dataclass
class MDGPSState:
    spec: object
    config: MDGPSConfig
    policy: object
    conditions: list
    iteration: int = 0

    @classmethod
    def initial(cls, spec, config):
        rng = np.random.default_rng(rollout_seed(config.seed, 0, 0, 0, STREAM_SGD))
        policy = spec.initial_policy(config.policy_arch, config.hidden, rng)
        lin = _initial_linearization(spec, policy)
        conds = [ConditionState(config.epsilon, lin,
                                dyn_buffer=PriorBuffer(config.prior_buffer_factor * spec.T))
                 for _ in range(spec.n_conditions)]
        return cls(spec, config, policy, conds)


def _initial_linearization(spec, policy):
    if policy.arch == "affine":
        return policy.as_lin_gauss(spec.T)
    # the initial network has a zero output layer, so its mean is exactly 0
    mean = policy.mean(spec.init_states[0])
    return TimeVaryingLinGauss.time_invariant(np.zeros((spec.du, spec.dx)), mean, policy.cov,
                                              spec.T)


@dataclass
class ConditionRecord:
    epsilon: float
    eta: float
    kl: float
    step_degenerate: bool
    dual_converged: bool
    costs: dict
    local_return: float
    global_return: float
    global_final_distance: float
    global_success: float
    bound: dict


@dataclass
class IterationRecord:
    iteration: int
    conditions: list
    s_step_loss: float
    mean_local_return: float
    mean_global_return: float
    mean_final_distance: float
    success_rate: float
    wall_time: float
    extra: dict = field(default_factory=dict)

    def validate(self):
        for c in self.conditions:
            if set(c.costs) != set(SIX_COSTS):
                raise InvalidInputError("iteration record is missing cost estimates")
            if self.iteration > 1 and not all(np.isfinite(v) for v in c.costs.values()):
                raise NumericalError(f"non-finite analytic cost at iteration {self.iteration}")
        return self

    def to_dict(self):
        return asdict(self)


def _analytic_cost(ctrl, dyn, cost, init):
    marg = propagate_marginals(ctrl, dyn, *init)
    return expected_cost(marg, cost)


def _fit_dynamics(spec, cfg, cond, samples, k, i):
    if cfg.dynamics == "exact":
        return spec.linear_dynamics(i)
    vecs = dynamics_vectors(samples).reshape(-1, 2 * spec.dx + spec.du)
    cond.dyn_buffer.push(vecs)
    prior = None
    if cfg.dynamics_prior_strength > 0:
        data = cond.dyn_buffer.data()
        n_comp = min(cfg.gmm_components, len(np.unique(data, axis=0)))
        prior = fit_gmm(data, n_comp, cfg.gmm_iters, rollout_seed(cfg.seed, k, i, 0, STREAM_GMM),
                        cfg.gmm_restarts, strength=cfg.dynamics_prior_strength)
    return fit_linear_gaussian(samples, prior, mode="dynamics")


def _linearize_policy(spec, cfg, policy, samples, k, i):
    if policy.arch == "affine":
        return policy.as_lin_gauss(spec.T)
    prior = None
    if cfg.policy_prior_strength > 0:
        X = samples.states.reshape(-1, spec.dx)
        Z = np.concatenate([X, policy.mean(X)], axis=1)
        n_comp = min(cfg.gmm_components, len(np.unique(Z, axis=0)))
        prior = fit_gmm(Z, n_comp, cfg.gmm_iters,
                        rollout_seed(cfg.seed, k, i, 1, STREAM_GMM), cfg.gmm_restarts,
                        strength=cfg.policy_prior_strength)
    return fit_policy_linearization(samples, policy, prior, targets=cfg.linearization_targets)


def _samples_of(rollouts, condition, source):
    return SampleSet(condition, np.stack([r.states for r in rollouts]),
                     np.stack([r.actions for r in rollouts]), source)


def run_iteration(state, config=None):
    """One iteration: sample, fit, C-step per condition, S-step, evaluate.

    ``state`` is updated in place and returned together with the record.
    """
    cfg = state.config if config is None else config
    spec = state.spec
    k = state.iteration + 1
    start = time.perf_counter()
    on_policy = cfg.sampling == "on_policy"
    new_locals, per_cond = [], []
    for i, cond in enumerate(state.conditions):
        actor = state.policy if on_policy else cond.local
        rolls = sample_rollouts(spec, actor, i, cfg.n_samples,
                                rollout_seed(cfg.seed, k, 0, 0, STREAM_TRAIN))
        samples = _samples_of(rolls, i, "global" if on_policy else "local")
        init = spec.init_distribution(i)
        dyn = _fit_dynamics(spec, cfg, cond, samples, k, i)
        pi_lin = _linearize_policy(spec, cfg, state.policy, samples, k, i)
        cost = average_expansion([cost_expand(spec, r.states, r.actions) for r in rolls])

        costs = dict.fromkeys(SIX_COSTS, math.nan)
        degenerate = False
        if cond.prev_dyn is not None:
            prev = (cond.prev_dyn, cond.prev_cost, init)
            cur = (dyn, cost, init)
            costs = {
                "cost_prev_pi_prev_dyn": _analytic_cost(cond.prev_pi, *prev),
                "cost_new_local_prev_dyn": _analytic_cost(cond.local, *prev),
                "cost_new_local_cur_dyn": _analytic_cost(cond.local, *cur),
                "cost_new_pi_prev_dyn": _analytic_cost(pi_lin, *prev),
                "cost_new_pi_cur_dyn": _analytic_cost(pi_lin, *cur),
                "cost_prev_local_prev_dyn": _analytic_cost(cond.prev_local, *prev),
            }
            step = STEP_RULES[cfg.step_rule](costs, cond.epsilon, cfg.clamps)
            cond.epsilon, degenerate = step.epsilon, step.degenerate

        try:
            local, kl, dual = c_step(dyn, cost, pi_lin, cond.epsilon, *init, eta0=cond.eta,
                                     kl_tol=cfg.kl_tol)
        except NumericalError as exc:
            raise NumericalError(f"C-step failed for condition {i} at iteration {k}: {exc}") from exc
        cond.eta = dual.eta
        cond.prev_dyn, cond.prev_cost, cond.prev_pi = dyn, cost, pi_lin
        cond.prev_local, cond.local = cond.local, local
        new_locals.append(local)
        per_cond.append(dict(epsilon=cond.epsilon, eta=dual.eta, kl=kl, costs=costs,
                             step_degenerate=degenerate, dual_converged=dual.converged,
                             dyn=dyn, init=init, cost=cost, samples=samples))

    state.policy, s_loss = _s_step(state, cfg, per_cond, new_locals, k)
    state.iteration = k

    records = []
    for i, (pc, local) in enumerate(zip(per_cond, new_locals)):
        g_rolls = sample_rollouts(spec, state.policy, i, cfg.n_eval,
                                  rollout_seed(cfg.seed, k, 0, 0, STREAM_EVAL_GLOBAL),
                                  deterministic=True)
        l_rolls = sample_rollouts(spec, local, i, cfg.n_samples,
                                  rollout_seed(cfg.seed, k, 0, 0, STREAM_EVAL_LOCAL))
        g_ret = float(np.mean([r.total_cost for r in g_rolls]))
        marg = propagate_marginals(local, pc["dyn"], *pc["init"])
        # divergence and cost ranges are measured on the new local controller's samples
        states = np.stack([r.states for r in l_rolls])
        step_costs = np.stack([r.costs for r in l_rolls])
        bound = compute_bound(local, state.policy, states, step_costs,
                              expected_cost_per_step(marg, pc["cost"]), g_ret)
        dist = final_distances(spec, g_rolls)
        records.append(ConditionRecord(
            pc["epsilon"], pc["eta"], pc["kl"], pc["step_degenerate"], pc["dual_converged"],
            pc["costs"], float(np.mean([r.total_cost for r in l_rolls])), g_ret,
            float(dist.mean()), float(np.mean(dist < spec.success_threshold)), bound.summary()))
    rec = IterationRecord(
        k, records, s_loss,
        float(np.mean([c.local_return for c in records])),
        float(np.mean([c.global_return for c in records])),
        float(np.mean([c.global_final_distance for c in records])),
        float(np.mean([c.global_success for c in records])),
        time.perf_counter() - start)
    log.info("iteration %d: global distance %.4f success %.2f local return %.3f eps %s",
             k, rec.mean_final_distance, rec.success_rate, rec.mean_local_return,
             [round(c.epsilon, 4) for c in records])
    return state, rec.validate()


def _s_step(state, cfg, per_cond, locals_, k):
    policy = state.policy
    if cfg.s_step == "exact":
        margs = [propagate_marginals(loc, pc["dyn"], *pc["init"])
                 for loc, pc in zip(locals_, per_cond)]
        new = project_affine_moments(policy, margs, locals_)
        return new, math.nan
    data = SStepDataset.from_controllers([pc["samples"].states for pc in per_cond], locals_)
    sgd = SGDConfig(cfg.sgd.batch_size, cfg.sgd.n_steps, cfg.sgd.learning_rate,
                    cfg.sgd.momentum, rollout_seed(cfg.seed, k, 0, 0, STREAM_SGD))
    return s_step_train(policy, data, sgd)


def global_policy_cost(spec, policy, condition=0):
    """Analytic expected cost of an affine policy under the task's exact linear dynamics."""
    dyn = spec.linear_dynamics(condition)
    init = spec.init_distribution(condition)
    X = np.zeros((spec.T, spec.dx))
    U = np.zeros((spec.T, spec.du))
    return _analytic_cost(policy.as_lin_gauss(spec.T), dyn, cost_expand(spec, X, U), init)


def run(spec, config, n_iterations, callback=None):
    """Run ``n_iterations`` iterations from the initial state; returns (state, records)."""
    state = MDGPSState.initial(spec, config)
    records = []
    for _ in range(n_iterations):
        state, rec = run_iteration(state)
        records.append(rec)
        if callback is not None:
            callback(state, rec)
    return state, records


__all__ = ["MDGPSConfig", "MDGPSState", "IterationRecord", "ConditionRecord", "BoundReport",
           "StepClamps", "StepResult", "adjust_step_classic", "adjust_step_global",
           "compute_bound", "cost_bound_rhs", "tv_bound", "q_max", "run_iteration", "run",
           "global_policy_cost", "SIX_COSTS", "LOG_2PI"]
