import numpy as np
import pytest

from varac import bellman
from varac.approximator import LinearQ, OneHotMlpQ, TabularQ, one_hot_features
from varac.boltzmann import policy_probs_from_values
from varac.em_exact import value_iteration_oracle
from varac.gradcheck import finite_difference, max_rel_error
from varac.mdp import DiscreteMdp, random_mdp


def _chain_mdp(gamma=0.5):
    # two states, deterministic: state 0 moves to 1, state 1 self-loops
    p = np.zeros((2, 2, 2))
    p[0, :, 1] = 1.0
    p[1, :, 1] = 1.0
    r = np.array([[1.0, 0.0], [2.0, 2.0]])
    return DiscreteMdp(p, r, np.array([1.0, 0.0]), gamma)


class TestApplyOperator:
    def test_zero_discount_returns_rewards(self, rng):
        mdp = random_mdp(4, 3, seed=1, gamma=0.0)
        q = rng.normal(size=(4, 3))
        uniform = np.full((4, 3), 1.0 / 3.0)
        for op in (bellman.optimal(), bellman.on_policy(uniform),
                   bellman.diminishing_temp(0.5), bellman.soft(uniform)):
            assert np.array_equal(bellman.apply_operator(op, q, mdp), mdp.reward)

    def test_greedy_backup_hand_computation(self):
        mdp = _chain_mdp(gamma=0.5)
        q = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = bellman.apply_operator(bellman.optimal(), q, mdp)
        # next state is always 1 whose best value is 4, so r + 0.5 * 4
        assert np.array_equal(out, np.array([[3.0, 2.0], [4.0, 4.0]]))

    def test_high_temperature_backup_is_uniform_backup(self, rng):
        mdp = random_mdp(4, 3, seed=2, gamma=0.9)
        q = rng.uniform(0.0, 1.0, size=(4, 3))
        hot = bellman.apply_operator(bellman.diminishing_temp(1e6), q, mdp)
        uniform = bellman.apply_operator(
            bellman.on_policy(np.full((4, 3), 1.0 / 3.0)), q, mdp)
        assert np.max(np.abs(hot - uniform)) < 1e-4

    def test_soft_rejects_zero_probability(self):
        mdp = _chain_mdp()
        q = np.zeros((2, 2))
        deterministic = np.array([[1.0, 0.0], [1.0, 0.0]])
        with pytest.raises(ValueError, match="strictly positive"):
            bellman.apply_operator(bellman.soft(deterministic), q, mdp)
        with pytest.raises(ValueError, match="explicit policy"):
            bellman.OperatorSpec("soft", policy=None)


class TestResidualError:
    def test_zero_at_optimal_table(self):
        mdp = random_mdp(5, 3, seed=3, gamma=0.9)
        q_star, _, _ = value_iteration_oracle(mdp, tol=1e-8)
        rr = bellman.residual_error(q_star, bellman.optimal(), mdp)
        assert rr.epsilon < 1e-10

    def test_zero_discount_zero_table(self):
        mdp = random_mdp(4, 2, seed=4, gamma=0.0)
        q = np.zeros((4, 2))
        rr = bellman.residual_error(q, bellman.optimal(), mdp)
        assert rr.epsilon == pytest.approx(0.5 * np.mean(mdp.reward ** 2), abs=1e-15)

    def test_scale_linearity(self, rng):
        mdp = random_mdp(4, 2, seed=4, gamma=0.8)
        q = rng.normal(size=(4, 2))
        base = bellman.residual_error(q, bellman.optimal(c=1.0), mdp).epsilon
        scaled = bellman.residual_error(q, bellman.optimal(c=10.0), mdp).epsilon
        assert scaled == pytest.approx(10.0 * base, rel=1e-12)

    def test_nonnegative_and_zero_iff_fixed_point(self, rng):
        mdp = random_mdp(4, 3, seed=5, gamma=0.9)
        for _ in range(10):
            q = rng.normal(size=(4, 3))
            rr = bellman.residual_error(q, bellman.optimal(), mdp)
            assert rr.epsilon >= 0.0
            assert (rr.epsilon == 0.0) == (np.max(np.abs(rr.beta)) == 0.0)


class TestSelfConsistentEps:
    def test_optimal_table_drives_eps_to_zero(self):
        mdp = random_mdp(4, 3, seed=6, gamma=0.9)
        q_star, _, _ = value_iteration_oracle(mdp, tol=1e-10)
        eps = bellman.solve_self_consistent_eps(q_star, mdp)
        assert eps < 1e-8

    def test_scalar_fixed_point_matches_bisection(self):
        mdp = random_mdp(1, 1, seed=7, gamma=0.5)
        q = TabularQ(1, 1, np.array([[0.3]]))
        eps = bellman.solve_self_consistent_eps(q, mdp)
        const = bellman.residual_error(q, bellman.on_policy(np.ones((1, 1))), mdp).epsilon
        lo, hi = 0.0, max(1.0, 2.0 * const)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if mid - const > 0.0:
                hi = mid
            else:
                lo = mid
        assert abs(eps - 0.5 * (lo + hi)) < 1e-8

    def test_fixed_point_property_on_random_mdps(self, rng):
        for seed in range(5):
            mdp = random_mdp(3, 3, seed=seed, gamma=0.8)
            q = TabularQ(3, 3, rng.uniform(0.0, 1.0, size=(3, 3)))
            eps = bellman.solve_self_consistent_eps(q, mdp)
            table = bellman.as_q_table(q, mdp)
            pol = np.stack([policy_probs_from_values(table[s], eps) for s in range(3)])
            resid = bellman.residual_error(q, bellman.on_policy(pol), mdp).epsilon
            assert abs(eps - resid) < 1e-9


class TestResidualGradients:
    def test_direct_hand_value_zero_discount(self, rng):
        mdp = random_mdp(3, 2, seed=8, gamma=0.0)
        q = TabularQ(3, 2, rng.normal(size=(3, 2)))
        grad = bellman.residual_grad_direct(q, bellman.optimal(), mdp)
        expected = (q.table - mdp.reward).ravel() / 6.0
        assert np.max(np.abs(grad - expected)) < 1e-15

    def test_direct_zero_at_fixed_point(self):
        mdp = random_mdp(3, 2, seed=9, gamma=0.9)
        q_star, _, _ = value_iteration_oracle(mdp, tol=1e-12)
        q = TabularQ(3, 2, q_star)
        grad = bellman.residual_grad_direct(q, bellman.optimal(), mdp)
        assert np.max(np.abs(grad)) < 1e-10

    def test_direct_batch_measure(self, rng):
        mdp = random_mdp(3, 2, seed=10, gamma=0.7)
        q = TabularQ(3, 2, rng.normal(size=(3, 2)))
        batch = [(0, 0), (0, 0), (2, 1)]
        grad = bellman.residual_grad_direct(q, bellman.optimal(), mdp, batch=batch)
        target = bellman.apply_operator(bellman.optimal(), q.table, mdp)
        expected = np.zeros(6)
        for s, a in batch:
            expected += (q.table[s, a] - target[s, a]) * q.grad((s, a))
        assert np.allclose(grad, expected / 3.0, atol=1e-15)

    @pytest.mark.parametrize("kind", ["tabular", "linear", "mlp"])
    def test_direct_matches_fd(self, kind, rng):
        mdp = random_mdp(3, 2, seed=11, gamma=0.8)
        if kind == "tabular":
            q = TabularQ(3, 2, rng.normal(size=(3, 2)))
        elif kind == "linear":
            q = LinearQ(one_hot_features(3, 2), 6, rng.normal(size=6))
        else:
            q = OneHotMlpQ(3, 2, 3, rng)
        target = bellman.apply_operator(bellman.optimal(), bellman.as_q_table(q, mdp), mdp)

        def frozen():
            table = bellman.as_q_table(q, mdp)
            return 0.5 * float(np.mean((table - target) ** 2))

        grad = bellman.residual_grad_direct(q, bellman.optimal(), mdp)
        assert max_rel_error(grad, finite_difference(frozen, q.params.values)) < 1e-4

    @pytest.mark.parametrize("kind", ["tabular", "linear", "mlp"])
    def test_twk_matches_fd_through_target(self, kind, rng):
        mdp = random_mdp(3, 2, seed=12, gamma=0.8)
        if kind == "tabular":
            q = TabularQ(3, 2, rng.normal(size=(3, 2)))
        elif kind == "linear":
            q = LinearQ(one_hot_features(3, 2), 6, rng.normal(size=6))
        else:
            q = OneHotMlpQ(3, 2, 3, rng)
        eps_k = 0.5

        def objective():
            return bellman.residual_error(q, bellman.diminishing_temp(eps_k), mdp).epsilon

        grad = bellman.residual_grad_twk(q, eps_k, mdp)
        assert max_rel_error(grad, finite_difference(objective, q.params.values)) < 1e-4

    def test_twk_zero_at_its_fixed_point(self):
        mdp = random_mdp(3, 2, seed=13, gamma=0.9)
        eps_k = 0.7
        q = np.zeros((3, 2))
        for _ in range(10_000):
            q = bellman.apply_operator(bellman.diminishing_temp(eps_k), q, mdp)
        grad = bellman.residual_grad_twk(TabularQ(3, 2, q), eps_k, mdp)
        assert np.max(np.abs(grad)) < 1e-10

    def test_twk_policy_term_kills_constant_gradients(self, rng):
        # the centering in the policy-movement term removes any gradient
        # component that is constant across actions
        mdp = random_mdp(3, 2, seed=14, gamma=0.8)
        q = TabularQ(3, 2, np.zeros((3, 2)))
        grad_lo = bellman.residual_grad_twk(q, 1e6, mdp)
        # with a constant table the softmax is uniform and the policy term
        # vanishes, leaving only the direct part; compare against it
        uniform = np.full((3, 2), 0.5)
        target = bellman.apply_operator(bellman.on_policy(uniform), q.table, mdp)
        direct = np.zeros(6)
        for s in range(3):
            for a in range(2):
                beta = target[s, a] - q.table[s, a]
                dbeta = mdp.gamma * np.repeat(mdp.transition[s, a] / 2.0, 2) - q.grad((s, a))
                direct += beta * dbeta
        assert np.max(np.abs(grad_lo - direct / 6.0)) < 1e-9


class TestProjectedResidual:
    def test_one_hot_features_recover_plain_residual(self, rng):
        mdp = random_mdp(3, 2, seed=15, gamma=0.8)
        table = rng.uniform(0.0, 1.0, size=(3, 2))
        pol = np.full((3, 2), 0.5)
        op = bellman.on_policy(pol)
        q_lin = LinearQ(one_hot_features(3, 2), 6, table.ravel().copy())
        eps_proj = bellman.projected_residual_linear(q_lin, op, mdp)
        eps_plain = bellman.residual_error(TabularQ(3, 2, table), op, mdp).epsilon
        assert abs(eps_proj - eps_plain) < 1e-12

    def test_zero_residual_is_stationary(self, rng):
        mdp = random_mdp(3, 2, seed=16, gamma=0.8)
        pol = np.full((3, 2), 0.5)
        op = bellman.on_policy(pol)
        q_lin = LinearQ(one_hot_features(3, 2), 6)
        state = bellman.run_gtd(q_lin, op, mdp)
        q_fixed = LinearQ(one_hot_features(3, 2), 6, state.weights.copy())
        assert bellman.projected_residual_linear(q_fixed, op, mdp) < 1e-12
        after = bellman.gtd_step(state, q_fixed, op, mdp, 0.05, 0.2)
        assert np.max(np.abs(after.weights - state.weights)) < 1e-9

    def test_gtd_converges_to_direct_solve(self):
        for seed in (17, 18, 19):
            mdp = random_mdp(3, 2, seed=seed, gamma=0.9)
            pol = np.full((3, 2), 0.5)
            op = bellman.on_policy(pol)
            q_lin = LinearQ(one_hot_features(3, 2), 6)
            state = bellman.run_gtd(q_lin, op, mdp)
            feats = np.eye(6)
            state_feats = np.einsum("ta,taf->tf", pol, feats.reshape(3, 2, 6))
            next_feats = np.einsum("sat,tf->saf", mdp.transition, state_feats).reshape(6, 6)
            a_mat = feats.T @ (feats - mdp.gamma * next_feats) / 6.0
            lstd = np.linalg.solve(a_mat, feats.T @ mdp.reward.ravel() / 6.0)
            assert np.max(np.abs(state.weights - lstd)) < 1e-6

    def test_singular_features_reported(self):
        mdp = random_mdp(3, 2, seed=20, gamma=0.8)
        q_lin = LinearQ(lambda h: np.array([1.0, 1.0]), 2)  # rank-one moments
        with pytest.raises(bellman.SingularFeatureMatrix) as err:
            bellman.projected_residual_linear(q_lin, bellman.on_policy(np.full((3, 2), 0.5)), mdp)
        assert err.value.cond > 1e12 or not np.isfinite(err.value.cond)


class TestIncrementalLimit:
    def test_gap_decreases_to_zero_on_fixture(self, rng):
        mdp = random_mdp(4, 3, seed=21, gamma=0.9)
        q = rng.uniform(0.0, 1.0, size=(4, 3)) + np.arange(3) * 0.1
        trace = bellman.incremental_limit(q, mdp, [1.0, 0.1, 0.01, 0.001, 1e-6])
        gaps = [pt.gap for pt in trace]
        assert all(g2 <= g1 for g1, g2 in zip(gaps, gaps[1:]))
        assert gaps[-1] < 1e-6

    def test_optimal_table_gap_vanishes(self):
        mdp = random_mdp(4, 3, seed=22, gamma=0.9)
        q_star, _, _ = value_iteration_oracle(mdp, tol=1e-10)
        trace = bellman.incremental_limit(q_star, mdp, [1.0, 0.01, 1e-6])
        assert trace[-1].gap < 1e-6

    def test_incremental_error_dominates_schedule(self, rng):
        mdp = random_mdp(4, 3, seed=23, gamma=0.9)
        q = rng.normal(size=(4, 3))
        trace = bellman.incremental_limit(q, mdp, [1.0, 0.1, 0.01])
        assert all(pt.eps_wk >= pt.eps_k for pt in trace)


class TestOperatorProperties:
    def test_greedy_backup_monotone(self, rng):
        mdp = random_mdp(4, 3, seed=24, gamma=0.9)
        for _ in range(20):
            qa = rng.normal(size=(4, 3))
            qb = qa + rng.uniform(0.0, 1.0, size=(4, 3))
            ta = bellman.apply_operator(bellman.optimal(), qa, mdp)
            tb = bellman.apply_operator(bellman.optimal(), qb, mdp)
            assert np.all(ta <= tb + 1e-12)

    def test_greedy_backup_contracts(self, rng):
        mdp = random_mdp(4, 3, seed=25, gamma=0.9)
        for _ in range(20):
            qa, qb = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
            ta = bellman.apply_operator(bellman.optimal(), qa, mdp)
            tb = bellman.apply_operator(bellman.optimal(), qb, mdp)
            assert np.max(np.abs(ta - tb)) <= mdp.gamma * np.max(np.abs(qa - qb)) + 1e-12

    def test_membership_in_target_set(self, rng):
        mdp = random_mdp(4, 3, seed=26, gamma=0.9)
        q = rng.uniform(0.0, 1.0, size=(4, 3)) + np.arange(3) * 0.05
        target = bellman.apply_operator(bellman.optimal(), q, mdp)
        pol = np.stack([policy_probs_from_values(q[s], 1e-9) for s in range(4)])
        assert np.max(np.abs(
            bellman.apply_operator(bellman.on_policy(pol), q, mdp) - target)) < 1e-6
        assert np.max(np.abs(
            bellman.apply_operator(bellman.diminishing_temp(1e-7), q, mdp) - target)) < 1e-6

    def test_soft_operator_fails_membership(self):
        mdp = random_mdp(4, 2, seed=27, gamma=0.9)
        q = np.tile(np.linspace(1.0, 2.0, 4)[:, None], (1, 2))
        uniform = np.full((4, 2), 0.5)
        soft = bellman.apply_operator(bellman.soft(uniform), q, mdp)
        hard = bellman.apply_operator(bellman.optimal(), q, mdp)
        bonus = mdp.gamma * np.log(2.0)
        assert np.min(soft - hard) >= bonus - 1e-12
