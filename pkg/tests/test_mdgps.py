import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import enumerate_cost, tabular_instance, tabular_marginals
from mdgps.envs import cost_expand, make_env, sample_rollouts
from mdgps.errors import InvalidInputError
from mdgps.mdgps import (SIX_COSTS, MDGPSConfig, MDGPSState, StepClamps, adjust_step_classic,
                         adjust_step_global, compute_bound, cost_bound_rhs, global_policy_cost,
                         q_max, run, run_iteration, tv_bound)
from mdgps.policy import GlobalPolicy, SGDConfig
from mdgps.trajdist import expected_cost_per_step, propagate_marginals


def costs(prev_pi, pred, real_local, real_pi=None):
    c = dict.fromkeys(SIX_COSTS, 0.0)
    c.update(cost_prev_pi_prev_dyn=prev_pi, cost_new_local_prev_dyn=pred,
             cost_new_local_cur_dyn=real_local,
             cost_new_pi_cur_dyn=real_local if real_pi is None else real_pi)
    return c


# ---------------------------------------------------------------- step rules


def test_classic_worked_examples():
    r = adjust_step_classic(costs(10, 8, 9), 1.0)
    assert abs(r.epsilon - 1.0) < 1e-12 and not r.degenerate
    r = adjust_step_classic(costs(10, 8, 8), 1.0)
    assert r.degenerate and abs(r.epsilon - 0.2) < 1e-12
    r = adjust_step_classic(costs(10, 6, 10), 1.0)
    assert abs(r.raw - 0.5) < 1e-12 and abs(r.epsilon - 0.5) < 1e-12


def test_global_worked_examples():
    assert abs(adjust_step_global(costs(10, 8, 0, 9), 1.0).epsilon - 1.0) < 1e-12
    r = adjust_step_global(costs(10, 8, 8, 12), 1.0)
    assert abs(r.raw - 0.25) < 1e-12 and abs(r.epsilon - 0.25) < 1e-12


def test_rules_agree_when_outcomes_coincide():
    c = costs(7.0, 5.0, 6.5, 6.5)
    assert adjust_step_classic(c, 0.3) == adjust_step_global(c, 0.3)


def test_outcome_better_than_predicted_takes_largest_step():
    r = adjust_step_classic(costs(10, 8, 7), 1.0)
    assert r.epsilon == pytest.approx(5.0) and not r.degenerate


def test_clamps():
    assert adjust_step_classic(costs(100, 8, 8.001), 1.0).epsilon == pytest.approx(5.0)
    assert adjust_step_classic(costs(100, 8, 8.001), 4.0).epsilon == 10.0
    assert adjust_step_classic(costs(10, 8, 8), 2e-4).epsilon == 1e-4
    assert adjust_step_classic(costs(10, 12, 13), 1.0).epsilon == pytest.approx(0.2)


def test_non_finite_costs_are_degenerate():
    assert adjust_step_classic(costs(math.nan, 8, 9), 1.0).degenerate


finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(finite, finite, st.floats(1e-3, 50), st.floats(1e-3, 50), st.floats(1e-3, 5))
def test_global_rule_shrinks_when_global_policy_is_worse(prev_pi, pred, d1, d2, eps):
    # l_k^{k,pi} > l_k^k > l_{k-1}^k with everything else fixed
    real_local = pred + d1
    real_pi = real_local + d2
    c = costs(prev_pi, pred, real_local, real_pi)
    classic, glob = adjust_step_classic(c, eps), adjust_step_global(c, eps)
    if prev_pi > pred:
        assert glob.raw < classic.raw
    assert glob.epsilon <= classic.epsilon


@settings(max_examples=200, deadline=None)
@given(finite, finite, finite, st.floats(1e-4, 10))
def test_step_stays_within_clamps(a, b, c, eps):
    for rule in (adjust_step_classic, adjust_step_global):
        e = rule(costs(a, b, c), eps).epsilon
        assert 1e-4 <= e <= 10 and eps / 5 * (1 - 1e-12) <= e <= eps * 5 * (1 + 1e-12)


# ---------------------------------------------------------------- bounds


def test_q_max_and_tv_bound_shapes():
    qm = q_max(np.array([1.0, 2.0, 0.5]))
    assert np.allclose(qm, [3.5, 2.5, 0.5])
    assert np.all(np.diff(qm) <= 0)
    assert np.allclose(tv_bound(np.array([0.0, 0.5, 2.0])), [0.0, 2.0, 6.0])


def test_cost_bound_with_zero_divergence_is_local_cost():
    assert cost_bound_rhs(np.array([1.0, 2.0]), np.zeros(2), np.array([5.0, 9.0])) == 3.0


def test_bounds_hold_on_random_tabular_problems():
    rng = np.random.default_rng(0)
    for _ in range(200):
        init, P, p, q, cost = tabular_instance(rng)
        T = len(P)
        eps = np.array([np.max(np.sum(p[t] * np.log(p[t] / q[t]), axis=1)) for t in range(T)])
        mp, mq = tabular_marginals(init, P, p), tabular_marginals(init, P, q)
        l1 = np.array([np.abs(a - b).sum() for a, b in zip(mp, mq)])
        assert (l1 <= tv_bound(eps) + 1e-12).all()
        exp_p = np.array([np.einsum("s,sa,sa->", mp[t], p[t], cost[t]) for t in range(T)])
        assert enumerate_cost(init, P, p, cost) == pytest.approx(exp_p.sum(), abs=1e-10)
        max_cost = cost.reshape(T, -1).max(axis=1)
        assert enumerate_cost(init, P, q, cost) <= cost_bound_rhs(exp_p, eps, max_cost) + 1e-12


def test_two_state_example_tv_bound():
    init = np.array([0.5, 0.5])
    P = np.array([[[[0.9, 0.1], [0.2, 0.8]], [[0.7, 0.3], [0.4, 0.6]]]] * 3)
    p = np.array([[[0.8, 0.2], [0.3, 0.7]]] * 3)
    q = np.array([[[0.6, 0.4], [0.5, 0.5]]] * 3)
    eps = [np.max(np.sum(p[t] * np.log(p[t] / q[t]), axis=1)) for t in range(3)]
    mp, mq = tabular_marginals(init, P, p), tabular_marginals(init, P, q)
    l1 = [np.abs(a - b).sum() for a, b in zip(mp, mq)]
    assert l1[0] == 0.0 and l1[-1] > 0
    assert all(a <= b for a, b in zip(l1, tv_bound(np.array(eps))))


def test_distilled_policy_has_zero_divergence_bound():
    spec = make_env("pointmass_lq", T=10)
    pi = GlobalPolicy.affine(4, 2, W=-np.eye(2, 4), b=[0.1, 0.0], cov=0.3)
    local = pi.as_lin_gauss(spec.T)
    rolls = sample_rollouts(spec, local, 0, 4, seed=2)
    dyn = spec.linear_dynamics(0)
    marg = propagate_marginals(local, dyn, *spec.init_distribution(0))
    exp_cost = expected_cost_per_step(marg, cost_expand(spec, rolls[0].states, rolls[0].actions))
    rep = compute_bound(local, pi, np.stack([r.states for r in rolls]),
                        np.stack([r.costs for r in rolls]), exp_cost)
    assert np.abs(rep.eps_t).max() < 1e-12
    assert rep.rhs == pytest.approx(exp_cost.sum(), rel=1e-9)
    assert (rep.eps_t >= 0).all() and (np.diff(rep.q_max_t) <= 0).all()


def test_bound_needs_samples():
    spec = make_env("pointmass_lq", T=3)
    pi = GlobalPolicy.affine(4, 2)
    with pytest.raises(InvalidInputError):
        compute_bound(pi.as_lin_gauss(3), pi, np.zeros((0, 3, 4)), np.zeros((0, 3)), np.zeros(3))


# ---------------------------------------------------------------- loop


def test_config_validation():
    with pytest.raises(InvalidInputError):
        MDGPSConfig(sampling="sideways")
    with pytest.raises(InvalidInputError):
        MDGPSConfig(epsilon=0.0)
    with pytest.raises(InvalidInputError):
        MDGPSConfig(s_step="exact", policy_arch="mlp")


LQ_CONFIG = MDGPSConfig(policy_arch="affine", s_step="exact", dynamics="exact",
                        epsilon=0.5, clamps=StepClamps(factor=1.0), kl_tol=1e-3)


def test_mirror_descent_on_linear_quadratic_task_is_monotone():
    spec = make_env("pointmass_lq", T=30, starts=[(2.0, 1.0), (2.0, -1.0)])
    state = MDGPSState.initial(spec, LQ_CONFIG)
    values = [sum(global_policy_cost(spec, state.policy, i) for i in range(2))]
    for _ in range(6):
        state, _ = run_iteration(state)
        values.append(sum(global_policy_cost(spec, state.policy, i) for i in range(2)))
    assert np.all(np.diff(values) <= 1e-8 * np.abs(values[:-1]))
    assert values[-1] < 0.5 * values[0]


def test_no_op_s_step_leaves_policy_and_pairings_unchanged():
    spec = make_env("pointmass", T=20, starts=[(2.0, 0.5), (2.0, -0.5)])
    cfg = MDGPSConfig(policy_arch="affine", sgd=SGDConfig(n_steps=0), n_eval=2)
    state = MDGPSState.initial(spec, cfg)
    before = state.policy.params.copy()
    for _ in range(2):
        state, rec = run_iteration(state)
    assert np.array_equal(state.policy.params, before)
    for c in rec.conditions:
        assert c.costs["cost_new_pi_prev_dyn"] == c.costs["cost_prev_pi_prev_dyn"]


def short_run(seed, **kw):
    spec = make_env("pointmass", T=20, starts=[(2.0, 0.5), (2.0, -0.5)])
    cfg = MDGPSConfig(seed=seed, hidden=(8, 8), sgd=SGDConfig(n_steps=50), n_eval=2, **kw)
    return run(spec, cfg, 3)[1]


def test_records_are_complete_and_within_clamps():
    recs = short_run(0, sampling="on_policy", step_rule="global")
    assert all(math.isnan(v) for v in recs[0].conditions[0].costs.values())
    for rec in recs[1:]:
        for c in rec.conditions:
            assert all(np.isfinite(v) for v in c.costs.values())
            assert 1e-4 <= c.epsilon <= 10
            if c.dual_converged:
                assert c.kl <= 1.05 * c.epsilon
            assert c.bound["eps_max"] >= 0
    d = recs[-1].to_dict()
    assert set(d["conditions"][0]["costs"]) == set(SIX_COSTS)


def test_runs_are_seed_deterministic():
    a, b = short_run(3), short_run(3)
    assert [r.mean_final_distance for r in a] == [r.mean_final_distance for r in b]
    assert [c.epsilon for c in a[-1].conditions] == [c.epsilon for c in b[-1].conditions]
    c = short_run(4)
    assert [r.mean_local_return for r in a] != [r.mean_local_return for r in c]


def test_config_replace_keeps_validation():
    with pytest.raises(InvalidInputError):
        replace(MDGPSConfig(), step_rule="local")
