"""Property suites behind the ``verify`` subcommand.

Each check reports a measured error and the tolerance it must meet; a suite
passes when every check does.  Setting the environment variable
``VARAC_FAULT=boltzmann_norm`` deliberately corrupts the softmax
normalisation inside this module (a fault-injection hook for testing the
failure path; the library itself is untouched).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import actor_critic, bellman, boltzmann, em_exact, maxent
from .approximator import (
    GaussianPolicy,
    LinearQ,
    MlpQ,
    OneHotMlpQ,
    TabularQ,
    ValueMlp,
    one_hot_features,
)
from .gradcheck import finite_difference, max_rel_error
from .mdp import CounterexampleParams, build_counterexample, random_mdp

SUITES = ("theorems", "operators", "gradients")


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.error <= self.tolerance)

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "error": float(self.error),
            "tolerance": float(self.tolerance),
            "passed": self.passed,
        }


def _maybe_corrupt(probs: np.ndarray) -> np.ndarray:
    if os.environ.get("VARAC_FAULT") == "boltzmann_norm":
        return probs * 1.001
    return probs


def _random_q_tables(rng, count, n_actions=5, min_gap=0.01):
    tables = []
    while len(tables) < count:
        q = rng.uniform(0.0, 1.0, size=n_actions)
        top = np.sort(q)
        if top[-1] - top[-2] >= min_gap:
            tables.append(q)
    return tables


# ----------------------------------------------------------------- theorems

def _check_dirac(rng):
    schedule = np.array([1.0, 0.1, 0.01, 0.001])
    worst_final, worst_increase, worst_norm = 0.0, 0.0, 0.0
    traces = []
    for i, values in enumerate(_random_q_tables(rng, 50)):
        q = TabularQ(1, values.size, values.reshape(1, -1))
        trace = boltzmann.dirac_limit(q, 0, schedule, np.arange(values.size))
        worst_final = max(worst_final, float(trace.tv_distances[-1]))
        worst_increase = max(worst_increase, float(np.max(np.diff(trace.tv_distances[1:], prepend=trace.tv_distances[1]))))
        for eps in schedule:
            probs = _maybe_corrupt(boltzmann.softmax_from_values(values, eps))
            worst_norm = max(worst_norm, abs(float(probs.sum()) - 1.0))
        traces.append((i, trace))
    return [
        CheckResult("dirac_limit_final_tv", worst_final, 1e-3),
        CheckResult("dirac_limit_monotone", worst_increase, 1e-12),
        CheckResult("boltzmann_normalization", worst_norm, 1e-10),
    ], traces


def _check_elbo(rng):
    worst_identity, worst_fit = 0.0, 0.0
    for _ in range(10):
        n_s, n_a = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        q_table = rng.uniform(0.0, 2.0, size=(n_s, n_a))
        eps = float(rng.uniform(0.3, 2.0))
        d = rng.dirichlet(np.ones(n_s))
        logits = rng.normal(size=(n_s, n_a))
        pi = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        dec = boltzmann.elbo_discrete(q_table, eps, pi, d)
        worst_identity = max(worst_identity, dec.identity_gap())
        fitted = boltzmann.fit_variational_policy(q_table, eps)
        target = np.stack([boltzmann.softmax_from_values(q_table[s], eps)
                           for s in range(n_s)])
        worst_fit = max(worst_fit, float(np.max(np.abs(fitted - target))))
    return [
        CheckResult("elbo_identity", worst_identity, 1e-10),
        CheckResult("variational_fit_recovers_softmax", worst_fit, 1e-8),
    ]


def _check_bayes(rng):
    q_table = rng.uniform(0.0, 1.0, size=(4, 3))
    eps = 0.7
    per_state, likelihood, _ = boltzmann.bayes_action_posterior(q_table, eps)
    direct = np.stack([
        boltzmann.boltzmann_probs(TabularQ(4, 3, q_table), s, eps, np.arange(3))
        for s in range(4)
    ])
    gap = float(np.max(np.abs(per_state - direct)))
    range_violation = max(float(np.max(likelihood - 1.0)), float(np.max(-likelihood)), 0.0)
    argmax_gap = float(np.max(np.abs(likelihood.max(axis=1) - 1.0)))
    return [
        CheckResult("bayes_posterior_equals_boltzmann", gap, 1e-12),
        CheckResult("bayes_likelihood_in_unit_interval", range_violation, 0.0),
        CheckResult("bayes_likelihood_argmax_is_one", argmax_gap, 1e-15),
    ]


def _check_elbo_divergence():
    grid = boltzmann.UniformGrid(-2.0, 2.0, 4001)
    q_of_action = lambda a: np.exp(-a * a)
    # Collapsing the policy to a point drives the bound below any level
    # (logarithmically in the scale).
    value = boltzmann.elbo_gaussian_single_state(q_of_action, 0.5, 0.3, 1e-300, grid)
    return [CheckResult("elbo_collapse_diverges", 0.0 if value < -500.0 else 1.0, 0.0)]


def _check_counterexample_grid():
    k1s = [1, 3, 10, 30, 100]
    gammas = [0.1, 0.3, 0.5, 0.9, 0.99]
    cs = [0.2, 0.5, 1.0, 2.0, 5.0]
    worst = 0.0
    region_errors = 0.0
    for k1 in k1s:
        for gamma in gammas:
            for c in cs:
                closed = maxent.optimal_p1_closed(k1, gamma, c)
                numeric = maxent.optimal_p1_numeric(k1, gamma, c)
                worst = max(worst, abs(closed.p1 - numeric))
                if closed.mode_flips != (closed.p1 > 0.5):
                    region_errors += 1.0
    return [
        CheckResult("counterexample_closed_vs_numeric", worst, 1e-8),
        CheckResult("counterexample_mode_flip_region", region_errors, 0.0),
    ]


def suite_theorems(seed: int):
    rng = np.random.default_rng([seed, 1])
    checks, traces = _check_dirac(rng)
    checks += _check_elbo(rng)
    checks += _check_bayes(rng)
    checks += _check_elbo_divergence()
    checks += _check_counterexample_grid()
    return checks, {"dirac_traces": traces}


# ---------------------------------------------------------------- operators

def _membership_fixture(seed):
    mdp = random_mdp(4, 3, seed, 0.9)
    rng = np.random.default_rng([seed, 2])
    q = rng.uniform(0.0, 2.0, size=(4, 3))
    # Break near-ties so the greedy limit is clean.
    q += np.arange(3) * 0.05
    return mdp, q


def suite_operators(seed: int):
    checks = []
    mdp, q = _membership_fixture(seed)
    target = bellman.apply_operator(bellman.optimal(), q, mdp)

    pol = np.stack([boltzmann.policy_probs_from_values(q[s], 1e-9)
                    for s in range(mdp.n_states)])
    gap = float(np.max(np.abs(bellman.apply_operator(bellman.on_policy(pol), q, mdp) - target)))
    checks.append(CheckResult("membership_on_policy_boltzmann", gap, 1e-6))

    gap = float(np.max(np.abs(
        bellman.apply_operator(bellman.diminishing_temp(1e-7), q, mdp) - target)))
    checks.append(CheckResult("membership_diminishing_temp", gap, 1e-6))

    # Constant rows make the greedy and uniform backups coincide, so the
    # entropy bonus is the whole difference.
    q_flat = np.tile(np.linspace(1.0, 2.0, mdp.n_states)[:, None], (1, mdp.n_actions))
    uniform = np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)
    soft_backup = bellman.apply_operator(bellman.soft(uniform), q_flat, mdp)
    hard_backup = bellman.apply_operator(bellman.optimal(), q_flat, mdp)
    bonus = mdp.gamma * np.log(mdp.n_actions)
    shortfall = max(0.0, bonus - float(np.min(soft_backup - hard_backup)))
    checks.append(CheckResult("soft_operator_fails_membership", shortfall, 1e-9))

    rng = np.random.default_rng([seed, 3])
    worst_mono, worst_contract = 0.0, 0.0
    for _ in range(20):
        qa = rng.normal(size=q.shape)
        qb = qa + rng.uniform(0.0, 1.0, size=q.shape)
        ta = bellman.apply_operator(bellman.optimal(), qa, mdp)
        tb = bellman.apply_operator(bellman.optimal(), qb, mdp)
        worst_mono = max(worst_mono, float(np.max(ta - tb)))
        qc = rng.normal(size=q.shape)
        tc = bellman.apply_operator(bellman.optimal(), qc, mdp)
        lhs = float(np.max(np.abs(ta - tc)))
        rhs = mdp.gamma * float(np.max(np.abs(qa - qc)))
        worst_contract = max(worst_contract, lhs - rhs)
    checks.append(CheckResult("optimal_backup_monotone", worst_mono, 1e-12))
    checks.append(CheckResult("optimal_backup_contraction", worst_contract, 1e-12))

    trace = bellman.incremental_limit(q, mdp, [1.0, 0.1, 0.01, 0.001, 1e-6])
    checks.append(CheckResult("incremental_limit_gap", trace[-1].gap, 1e-6))

    worst_pi = 0.0
    for i in range(20):
        m = random_mdp(10, 4, seed * 1000 + i, 0.9)
        final = em_exact.em_policy_iteration(m)[-1]
        q_star, _, _ = em_exact.value_iteration_oracle(m, tol=1e-8)
        worst_pi = max(worst_pi, float(np.max(np.abs(final.q - q_star))))
    checks.append(CheckResult("em_policy_iteration_vs_oracle", worst_pi, 1e-6))

    m = random_mdp(5, 3, seed + 17, 0.9)
    rng_q = np.random.default_rng([seed, 4])
    q0 = rng_q.uniform(0.0, 1.0, size=(5, 3))
    trace_q = em_exact.em_q_learning(m, q0, 6)
    composed = trace_q[1].copy()
    for _ in range(5):
        composed = bellman.apply_operator(bellman.optimal(), composed, m)
    checks.append(CheckResult(
        "em_q_learning_matches_greedy_composition",
        float(np.max(np.abs(trace_q[6] - composed))), 0.0))

    m3 = random_mdp(3, 2, seed + 5, 0.9)
    q_lin = LinearQ(one_hot_features(3, 2), 6)
    pol3 = np.full((3, 2), 0.5)
    op3 = bellman.on_policy(pol3)
    state = bellman.run_gtd(q_lin, op3, m3)
    feats = np.eye(6)
    state_feats = np.einsum("ta,taf->tf", pol3, feats.reshape(3, 2, 6))
    next_feats = np.einsum("sat,tf->saf", m3.transition, state_feats).reshape(6, 6)
    a_mat = feats.T @ (feats - m3.gamma * next_feats) / 6.0
    lstd = np.linalg.solve(a_mat, feats.T @ m3.reward.reshape(-1) / 6.0)
    checks.append(CheckResult(
        "gtd_reaches_least_squares_fixed_point",
        float(np.max(np.abs(state.weights - lstd))), 1e-6))

    rng5 = np.random.default_rng([seed, 5])
    q_tab = TabularQ(3, 2, rng5.uniform(0.0, 1.0, size=(3, 2)))
    q_as_lin = LinearQ(one_hot_features(3, 2), 6, q_tab.table.ravel().copy())
    eps_proj = bellman.projected_residual_linear(q_as_lin, op3, m3)
    eps_plain = bellman.residual_error(q_tab, op3, m3).epsilon
    checks.append(CheckResult("projected_equals_plain_under_one_hot",
                              abs(eps_proj - eps_plain), 1e-12))

    ce = build_counterexample(CounterexampleParams(k1=3, k2=4, gamma=0.9, c=1.0))
    final = em_exact.em_policy_iteration(ce)[-1]
    checks.append(CheckResult("counterexample_greedy_start_action",
                              float(final.policy.greedy_actions()[0] != 1), 0.0))

    single = random_mdp(1, 1, seed + 9, 0.5)
    q1 = TabularQ(1, 1, np.array([[0.3]]))
    fixed = bellman.solve_self_consistent_eps(q1, single)
    # One action means the policy cannot depend on the temperature, so the
    # fixed point is the constant residual; bisection provides the oracle.
    const = bellman.residual_error(q1, bellman.on_policy(np.ones((1, 1))), single).epsilon
    lo, hi = 0.0, max(1.0, 2.0 * const)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid - const > 0.0:
            hi = mid
        else:
            lo = mid
    checks.append(CheckResult("self_consistent_eps_scalar_oracle",
                              abs(fixed - 0.5 * (lo + hi)), 1e-8))
    return checks, {}


# ---------------------------------------------------------------- gradients

def _fd_check(name, analytic, scalar_fn, values, tol=1e-4, delta=1e-5):
    numeric = finite_difference(scalar_fn, values, delta)
    return CheckResult(name, max_rel_error(analytic, numeric), tol)


def suite_gradients(seed: int, draws: int = 50):
    rng = np.random.default_rng([seed, 6])
    checks = []

    worst = {"tabular": 0.0, "linear": 0.0, "mlp": 0.0}
    for i in range(draws):
        tab = TabularQ(3, 2, rng.normal(size=(3, 2)))
        h = (int(rng.integers(3)), int(rng.integers(2)))
        numeric = finite_difference(lambda: tab.value(h), tab.params.values)
        worst["tabular"] = max(worst["tabular"], max_rel_error(tab.grad(h), numeric))

        lin = LinearQ(lambda hh: np.array([hh[0], hh[1], 1.0, hh[0] * hh[1]]), 4,
                      rng.normal(size=4))
        numeric = finite_difference(lambda: lin.value(h), lin.params.values)
        worst["linear"] = max(worst["linear"], max_rel_error(lin.grad(h), numeric))

        mlp = MlpQ(2, 1, 4, rng)
        hm = (rng.normal(size=2), rng.normal(size=1))
        numeric = finite_difference(lambda: mlp.value(hm), mlp.params.values)
        worst["mlp"] = max(worst["mlp"], max_rel_error(mlp.grad(hm), numeric))
    for kind, err in worst.items():
        checks.append(CheckResult(f"q_grad_fd_{kind}", err, 1e-4))

    worst_v = worst_q = worst_pi = worst_beta = 0.0
    for i in range(draws):
        rng_i = np.random.default_rng([seed, 7, i])
        states = rng_i.normal(size=(4, 2))
        noise = rng_i.normal(size=(4, 1))
        policy = GaussianPolicy(2, 1, 3, rng_i, log_std_bias=-0.5)
        q_net = MlpQ(2, 1, 3, rng_i)
        v_net = ValueMlp(2, 3, rng_i)
        v_tgt = ValueMlp(2, 3, rng_i)

        _, grad = actor_critic.j_v_loss(v_net, q_net, policy, states, noise)
        fn = lambda: actor_critic.j_v_loss(v_net, q_net, policy, states, noise)[0]
        worst_v = max(worst_v, max_rel_error(grad, finite_difference(fn, v_net.params.values)))

        batch = actor_critic.Batch(states, rng_i.normal(size=(4, 1)),
                                   rng_i.normal(size=4), rng_i.normal(size=(4, 2)),
                                   (rng_i.random(4) < 0.3).astype(float))
        _, grad = actor_critic.j_q_loss(q_net, batch, v_tgt, 0.9)
        fn = lambda: actor_critic.j_q_loss(q_net, batch, v_tgt, 0.9)[0]
        worst_q = max(worst_q, max_rel_error(grad, finite_difference(fn, q_net.params.values)))

        _, grad = actor_critic.j_pi_virel_loss(policy, q_net, v_tgt, states, noise, 0.2)
        fn = lambda: actor_critic.j_pi_virel_loss(policy, q_net, v_tgt, states, noise, 0.2)[0]
        worst_pi = max(worst_pi, max_rel_error(grad, finite_difference(fn, policy.params.values)))

        _, grad = actor_critic.j_pi_beta_loss(policy, q_net, v_tgt, states, noise, 0.7, 0.05)
        fn = lambda: actor_critic.j_pi_beta_loss(policy, q_net, v_tgt, states, noise, 0.7, 0.05)[0]
        worst_beta = max(worst_beta, max_rel_error(grad, finite_difference(fn, policy.params.values)))
    checks.append(CheckResult("j_v_loss_fd", worst_v, 1e-4))
    checks.append(CheckResult("j_q_loss_fd", worst_q, 1e-4))
    checks.append(CheckResult("j_pi_virel_fd", worst_pi, 1e-4))
    checks.append(CheckResult("j_pi_beta_fd", worst_beta, 1e-4))

    worst_direct = worst_twk = 0.0
    for i in range(draws):
        m = random_mdp(3, 2, seed * 31 + i, 0.8)
        kind = i % 3
        rng_i = np.random.default_rng([seed, 8, i])
        if kind == 0:
            q = TabularQ(3, 2, rng_i.normal(size=(3, 2)))
        elif kind == 1:
            q = LinearQ(one_hot_features(3, 2), 6, rng_i.normal(size=6))
        else:
            q = OneHotMlpQ(3, 2, 3, rng_i)
        op = bellman.optimal()
        target = bellman.apply_operator(op, bellman.as_q_table(q, m), m)

        def frozen_objective():
            table = bellman.as_q_table(q, m)
            return 0.5 * float(np.mean((table - target) ** 2))

        grad = bellman.residual_grad_direct(q, op, m)
        worst_direct = max(worst_direct, max_rel_error(
            grad, finite_difference(frozen_objective, q.params.values)))

        eps_k = 0.5

        def through_objective():
            rr = bellman.residual_error(q, bellman.diminishing_temp(eps_k), m)
            return rr.epsilon

        grad = bellman.residual_grad_twk(q, eps_k, m)
        worst_twk = max(worst_twk, max_rel_error(
            grad, finite_difference(through_objective, q.params.values)))
    checks.append(CheckResult("residual_grad_direct_fd", worst_direct, 1e-4))
    checks.append(CheckResult("residual_grad_twk_fd", worst_twk, 1e-4))

    worst_e = worst_m = 0.0
    for i in range(draws):
        rng_i = np.random.default_rng([seed, 9, i])
        m = random_mdp(3, 3, seed * 77 + i, 0.8)
        q_table = rng_i.uniform(0.0, 1.0, size=(3, 3))
        d = rng_i.dirichlet(np.ones(3))
        logits = rng_i.normal(size=(3, 3))
        eps = float(rng_i.uniform(0.2, 1.0))

        def scaled_bound():
            z = logits - logits.max(axis=1, keepdims=True)
            pi = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
            ent = -(pi * np.log(pi)).sum(axis=1)
            return eps * float(d @ ((pi * q_table).sum(axis=1) / eps + ent))

        grad = actor_critic.e_step_gradient(logits, d, q_table, eps)
        numeric = finite_difference(scaled_bound, logits.reshape(-1)).reshape(logits.shape)
        worst_e = max(worst_e, max_rel_error(grad.reshape(-1), numeric.reshape(-1)))

        q_m = TabularQ(3, 3, rng_i.uniform(0.5, 1.5, size=(3, 3)))
        z = logits - logits.max(axis=1, keepdims=True)
        pi = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        eps_k = 0.5

        def bound_in_omega():
            table = bellman.as_q_table(q_m, m)
            eps_w = bellman.residual_error(q_m, bellman.diminishing_temp(eps_k), m).epsilon + eps_k
            expected_q = float((d[:, None] * pi * table).sum())
            ent = -(pi * np.log(pi)).sum(axis=1)
            return expected_q / eps_w + float(d @ ent)

        eps_w = bellman.residual_error(q_m, bellman.diminishing_temp(eps_k), m).epsilon + eps_k
        grad_eps = bellman.residual_grad_twk(q_m, eps_k, m)
        grad = actor_critic.m_step_gradient(q_m, d, pi, eps_w, grad_eps)
        numeric = eps_w ** 2 * finite_difference(bound_in_omega, q_m.params.values)
        worst_m = max(worst_m, max_rel_error(grad, numeric))
    checks.append(CheckResult("e_step_gradient_fd", worst_e, 1e-4))
    checks.append(CheckResult("m_step_gradient_fd", worst_m, 1e-4))
    return checks, {}


def run_suite(suite: str, seed: int = 0):
    """Run one named suite (or all); returns (checks, artifacts)."""
    if suite == "all":
        checks, artifacts = [], {}
        for name in SUITES:
            sub_checks, sub_art = run_suite(name, seed)
            checks += sub_checks
            artifacts.update(sub_art)
        return checks, artifacts
    if suite == "theorems":
        return suite_theorems(seed)
    if suite == "operators":
        return suite_operators(seed)
    if suite == "gradients":
        return suite_gradients(seed)
    raise ValueError(f"unknown suite {suite!r}")
