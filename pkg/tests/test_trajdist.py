import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import (moment_zscores, random_controller, random_dynamics, random_spd,
                     simulate, traj_logpdf)
from mdgps.trajdist import (InvalidInputError, QuadraticCostExpansion, TimeVaryingLinGauss,
                            entropy, expected_cost, kl_per_step, kl_step, propagate_marginals,
                            traj_kl)


def scalar_ctrl(K, k, C, T=1):
    return TimeVaryingLinGauss.time_invariant([[K]], [k], [[C]], T)


def test_covariance_must_be_positive_definite():
    with pytest.raises(InvalidInputError):
        TimeVaryingLinGauss(np.zeros((1, 1, 1)), np.zeros((1, 1)), -np.ones((1, 1, 1)))
    with pytest.raises(InvalidInputError):
        TimeVaryingLinGauss(np.zeros((1, 2, 1)), np.zeros((1, 2)), np.array([[[1.0, 0.5], [0.4, 1.0]]]))


def test_arrays_are_read_only():
    p = scalar_ctrl(1.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        p.K[0, 0, 0] = 2.0


class TestKlStep:
    def test_identity_is_zero(self):
        rng = np.random.default_rng(0)
        p = random_controller(rng, 3, 2, 2)
        for t in range(3):
            assert kl_step(p, p, t, rng.normal(size=2), random_spd(rng, 2)) == pytest.approx(0.0, abs=1e-12)

    def test_unit_mean_shift(self):
        p = scalar_ctrl(0.0, 0.0, 1.0)
        q = scalar_ctrl(0.0, 1.0, 1.0)
        assert kl_step(p, q, 0, [0.3], [[2.0]]) == pytest.approx(0.5, abs=1e-14)

    def test_matches_monte_carlo_over_states(self):
        rng = np.random.default_rng(1)
        p = random_controller(rng, 1, 2, 2)
        q = random_controller(rng, 1, 2, 2)
        xs = rng.normal(size=(100_000, 2))
        # pointwise Gaussian KL written out independently
        Pq = np.linalg.inv(q.cov[0])
        d = xs @ (p.K[0] - q.K[0]).T + p.k[0] - q.k[0]
        const = np.trace(Pq @ p.cov[0]) - 2 + np.log(np.linalg.det(q.cov[0]) / np.linalg.det(p.cov[0]))
        pointwise = 0.5 * (const + np.einsum("ni,ij,nj->n", d, Pq, d))
        se = pointwise.std() / np.sqrt(len(xs))
        assert abs(kl_step(p, q, 0, np.zeros(2), np.eye(2)) - pointwise.mean()) < 3 * se

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(2)
        with pytest.raises(InvalidInputError):
            kl_step(random_controller(rng, 1, 2, 1), random_controller(rng, 1, 2, 2), 0,
                    np.zeros(2), np.eye(2))


class TestTrajKl:
    def test_identity(self):
        rng = np.random.default_rng(3)
        p = random_controller(rng, 4, 2, 1)
        dyn = random_dynamics(rng, 3, 2, 1)
        assert traj_kl(p, p, dyn, np.zeros(2), np.eye(2)) == 0.0

    def test_scalar_two_step_matches_monte_carlo(self):
        rng = np.random.default_rng(4)
        dyn = TimeVaryingLinGauss.from_dynamics(np.ones((1, 1, 1)), np.ones((1, 1, 1)),
                                                np.zeros((1, 1)), np.full((1, 1, 1), 0.5))
        p = TimeVaryingLinGauss(np.full((2, 1, 1), -0.3), np.array([[0.5], [-0.2]]), np.ones((2, 1, 1)))
        q = TimeVaryingLinGauss(np.full((2, 1, 1), -0.3), np.array([[-0.4], [0.6]]), np.full((2, 1, 1), 1.5))
        m0, S0 = np.array([0.2]), np.array([[1.0]])
        X, U = simulate(p, dyn, m0, S0, 100_000, rng)
        diff = traj_logpdf(p, dyn, m0, S0, X, U) - traj_logpdf(q, dyn, m0, S0, X, U)
        se = diff.std() / np.sqrt(len(diff))
        assert abs(traj_kl(p, q, dyn, m0, S0) - diff.mean()) < 3 * se

    def test_bias_sign_flip_symmetry(self):
        rng = np.random.default_rng(5)
        dyn = TimeVaryingLinGauss.from_dynamics(np.ones((2, 1, 1)), np.ones((2, 1, 1)),
                                                np.zeros((2, 1)), np.full((2, 1, 1), 0.1))
        p = TimeVaryingLinGauss(np.full((3, 1, 1), -0.2), rng.normal(size=(3, 1)), np.ones((3, 1, 1)))
        q = TimeVaryingLinGauss(np.full((3, 1, 1), 0.4), rng.normal(size=(3, 1)), np.full((3, 1, 1), 2.0))
        flip = lambda c: TimeVaryingLinGauss(c.K, -c.k, c.cov)
        a = traj_kl(p, q, dyn, np.zeros(1), np.eye(1))
        b = traj_kl(flip(p), flip(q), dyn, np.zeros(1), np.eye(1))
        assert a == pytest.approx(b, rel=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31), T=st.integers(1, 6), dx=st.integers(1, 3), du=st.integers(1, 3))
    def test_equals_sum_of_kl_steps(self, seed, T, dx, du):
        rng = np.random.default_rng(seed)
        p, q = random_controller(rng, T, dx, du), random_controller(rng, T, dx, du)
        dyn = random_dynamics(rng, T, dx, du)
        m0, S0 = rng.normal(size=dx), random_spd(rng, dx)
        marg = propagate_marginals(p, dyn, m0, S0)
        steps = sum(kl_step(p, q, t, marg.state_mean[t], marg.state_cov[t]) for t in range(T))
        total = traj_kl(p, q, dyn, m0, S0)
        assert total >= 0.0
        assert total == pytest.approx(steps, abs=1e-9, rel=1e-9)


class TestPropagateMarginals:
    def test_zero_gain_single_step(self):
        C = np.array([[2.0, 0.3], [0.3, 1.0]])
        ctrl = TimeVaryingLinGauss(np.zeros((1, 2, 3)), np.zeros((1, 2)), C[None])
        dyn = random_dynamics(np.random.default_rng(0), 1, 3, 2)
        m0 = np.array([1.0, -2.0, 0.5])
        marg = propagate_marginals(ctrl, dyn, m0, np.eye(3))
        np.testing.assert_array_equal(marg.mean[0], np.r_[m0, 0.0, 0.0])
        np.testing.assert_array_equal(marg.action_cov[0], C)
        np.testing.assert_array_equal(marg.cov[0, :3, 3:], 0.0)

    def test_cross_covariance_block(self):
        rng = np.random.default_rng(6)
        ctrl, dyn = random_controller(rng, 5, 3, 2), random_dynamics(rng, 4, 3, 2)
        marg = propagate_marginals(ctrl, dyn, rng.normal(size=3), random_spd(rng, 3))
        for t in range(5):
            np.testing.assert_allclose(marg.cov[t, :3, 3:], marg.state_cov[t] @ ctrl.K[t].T, atol=1e-14)

    def test_state_block_chains_from_previous_step(self):
        rng = np.random.default_rng(7)
        ctrl, dyn = random_controller(rng, 4, 2, 2), random_dynamics(rng, 4, 2, 2)
        marg = propagate_marginals(ctrl, dyn, np.zeros(2), np.eye(2))
        for t in range(3):
            f = dyn.K[t]
            nxt = f @ marg.cov[t] @ f.T + dyn.cov[t]
            np.testing.assert_array_equal(marg.state_cov[t + 1], 0.5 * (nxt + nxt.T))
        assert marg.next_mean is not None

    def test_scalar_system_matches_rollouts(self):
        rng = np.random.default_rng(8)
        ctrl = scalar_ctrl(-0.5, 0.1, 1.0, T=3)
        dyn = TimeVaryingLinGauss.from_dynamics(np.full((2, 1, 1), 0.9), np.ones((2, 1, 1)),
                                                np.zeros((2, 1)), np.ones((2, 1, 1)))
        marg = propagate_marginals(ctrl, dyn, np.zeros(1), np.eye(1))
        X, U = simulate(ctrl, dyn, np.zeros(1), np.eye(1), 100_000, rng)
        for t in range(3):
            z_mean, z_cov = moment_zscores(np.c_[X[:, t], U[:, t]], marg.mean[t], marg.cov[t])
            assert np.all(np.abs(z_mean) < 3) and np.all(np.abs(z_cov) < 3)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31), T=st.integers(1, 8))
    def test_state_covariances_psd(self, seed, T):
        rng = np.random.default_rng(seed)
        ctrl, dyn = random_controller(rng, T, 3, 2, gain=2.0), random_dynamics(rng, T, 3, 2)
        marg = propagate_marginals(ctrl, dyn, np.zeros(3), np.zeros((3, 3)))
        assert np.linalg.eigvalsh(marg.state_cov).min() >= -1e-10

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(9)
        with pytest.raises(InvalidInputError):
            propagate_marginals(random_controller(rng, 3, 2, 1), random_dynamics(rng, 2, 2, 2),
                                np.zeros(2), np.eye(2))
        with pytest.raises(InvalidInputError):
            propagate_marginals(random_controller(rng, 3, 2, 1), random_dynamics(rng, 1, 2, 1),
                                np.zeros(2), np.eye(2))


def random_cost(rng, T, dx, du, psd=True):
    n = dx + du
    H = np.stack([random_spd(rng, n) if psd else (lambda A: A + A.T)(rng.normal(size=(n, n)))
                  for _ in range(T)])
    return QuadraticCostExpansion(H, rng.normal(size=(T, n)), rng.normal(size=T),
                                  rng.normal(size=(T, n)), dx)


class TestExpectedCost:
    def test_zero_cost(self):
        rng = np.random.default_rng(10)
        ctrl, dyn = random_controller(rng, 3, 2, 1), random_dynamics(rng, 2, 2, 1)
        marg = propagate_marginals(ctrl, dyn, np.zeros(2), np.eye(2))
        assert expected_cost(marg, QuadraticCostExpansion.zeros(3, 2, 1)) == 0.0

    def test_deterministic_marginals(self):
        rng = np.random.default_rng(11)
        cost = random_cost(rng, 4, 2, 2, psd=False)
        ctrl = TimeVaryingLinGauss(0.3 * rng.normal(size=(4, 2, 2)), rng.normal(size=(4, 2)),
                                   np.broadcast_to(1e-300 * np.eye(2), (4, 2, 2)))
        dyn = TimeVaryingLinGauss(rng.normal(size=(3, 2, 4)), rng.normal(size=(3, 2)),
                                  np.broadcast_to(1e-300 * np.eye(2), (3, 2, 2)))
        x = rng.normal(size=2)
        marg = propagate_marginals(ctrl, dyn, x, np.zeros((2, 2)))
        direct = 0.0
        for t in range(4):
            u = ctrl.mean(t, x)
            direct += cost.evaluate(t, x, u)
            if t < 3:
                x = dyn.mean(t, np.r_[x, u])
        assert expected_cost(marg, cost) == pytest.approx(direct, rel=1e-10)

    def test_matches_sampled_costs(self):
        rng = np.random.default_rng(12)
        ctrl, dyn = random_controller(rng, 4, 2, 2), random_dynamics(rng, 3, 2, 2)
        cost = random_cost(rng, 4, 2, 2)
        m0, S0 = rng.normal(size=2), random_spd(rng, 2)
        X, U = simulate(ctrl, dyn, m0, S0, 100_000, rng)
        Z = np.concatenate([X, U], axis=2) - cost.z_hat
        sampled = (np.einsum("nti,ti->n", Z, cost.g) + 0.5 * np.einsum("nti,tij,ntj->n", Z, cost.H, Z)
                   + cost.c.sum())
        se = sampled.std() / np.sqrt(len(sampled))
        analytic = expected_cost(propagate_marginals(ctrl, dyn, m0, S0), cost)
        assert abs(analytic - sampled.mean()) < 3 * se

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31), a=st.floats(-3, 3), b=st.floats(-3, 3))
    def test_linear_in_cost(self, seed, a, b):
        rng = np.random.default_rng(seed)
        ctrl, dyn = random_controller(rng, 3, 2, 1), random_dynamics(rng, 2, 2, 1)
        marg = propagate_marginals(ctrl, dyn, rng.normal(size=2), random_spd(rng, 2))
        c1, c2 = random_cost(rng, 3, 2, 1, psd=False), random_cost(rng, 3, 2, 1, psd=False)
        combined = expected_cost(marg, c1.scaled(a) + c2.scaled(b))
        separate = a * expected_cost(marg, c1) + b * expected_cost(marg, c2)
        assert combined == pytest.approx(separate, abs=1e-9 * (1 + abs(separate)))

    def test_recentering_preserves_the_quadratic(self):
        rng = np.random.default_rng(13)
        cost = random_cost(rng, 2, 2, 1, psd=False)
        moved = cost.recentered(rng.normal(size=(2, 3)))
        x, u = rng.normal(size=2), rng.normal(size=1)
        assert moved.evaluate(1, x, u) == pytest.approx(cost.evaluate(1, x, u), rel=1e-12)


class TestEntropy:
    def test_unit_variance(self):
        assert entropy(scalar_ctrl(0.0, 0.0, 1.0))[0] == pytest.approx(0.5 * np.log(2 * np.pi * np.e))
        assert entropy(scalar_ctrl(0.0, 0.0, 1.0))[0] == pytest.approx(1.4189, abs=1e-4)

    def test_scaling_by_four_adds_log_two(self):
        h1 = entropy(scalar_ctrl(0.0, 0.0, 1.0))[0]
        h4 = entropy(scalar_ctrl(0.0, 0.0, 4.0))[0]
        assert h4 - h1 == pytest.approx(np.log(2.0), abs=1e-14)

    def test_independent_of_mean_terms(self):
        rng = np.random.default_rng(14)
        p = random_controller(rng, 3, 2, 2)
        q = TimeVaryingLinGauss(rng.normal(size=p.K.shape), rng.normal(size=p.k.shape), p.cov)
        np.testing.assert_array_equal(entropy(p), entropy(q))

    def test_kl_per_step_matches_log_density_identity(self):
        # KL(p||q) = -E_p[log q] - H(p), with E_p[log q] from samples at one state
        rng = np.random.default_rng(15)
        p, q = random_controller(rng, 1, 2, 2), random_controller(rng, 1, 2, 2)
        x = rng.normal(size=2)
        us = np.array([p.sample(0, x, rng) for _ in range(20_000)])
        logq = np.array([q.logpdf(0, x, u) for u in us])
        est = -logq.mean() - entropy(p)[0]
        dyn = TimeVaryingLinGauss(np.zeros((1, 2, 4)), np.zeros((1, 2)), np.eye(2)[None])
        marg = propagate_marginals(p, dyn, x, np.zeros((2, 2)))
        assert kl_per_step(p, q, marg)[0] == pytest.approx(est, abs=4 * logq.std() / np.sqrt(len(us)))
