"""Expected Bellman backups and residual errors on discrete MDPs.

The operator family covers the on-policy backup (with an explicit policy or
one implied by the residual temperature), the greedy backup, a fixed-schedule
softmax backup, and the entropy-augmented backup.  Residual errors use the
mean-over-grid convention eps = (c/p) * mean |T Q - Q|^p so values are
comparable across MDP sizes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boltzmann import policy_probs_from_values, softmax_from_values
from .mdp import DiscreteMdp

EPS_FLOOR = 1e-8


class ConvergenceError(RuntimeError):
    """An iterative solver hit its cap without meeting tolerance."""


class SingularFeatureMatrix(np.linalg.LinAlgError):
    def __init__(self, cond: float):
        super().__init__(f"feature second-moment matrix is singular (cond={cond:.3e})")
        self.cond = cond


@dataclass(frozen=True)
class OperatorSpec:
    """Backup operator description.

    kind is one of "on_policy", "optimal", "diminishing_temp", "soft".
    ``policy`` is a row-stochastic [S, A] table for on_policy and soft; an
    on_policy spec with ``policy=None`` means the softmax policy at the
    self-consistent residual temperature.  ``eps_k`` is the fixed temperature
    of the diminishing-temperature operator.
    """

    kind: str
    policy: np.ndarray | None = None
    eps_k: float | None = None
    p: int = 2
    c: float = 1.0

    def __post_init__(self):
        if self.kind not in ("on_policy", "optimal", "diminishing_temp", "soft"):
            raise ValueError(f"unknown operator kind {self.kind!r}")
        if self.c <= 0.0:
            raise ValueError("scale c must be positive")
        if self.p < 1:
            raise ValueError("norm exponent p must be at least 1")
        if self.kind == "diminishing_temp" and (self.eps_k is None or self.eps_k <= 0.0):
            raise ValueError("diminishing_temp needs eps_k > 0")
        if self.kind == "soft" and self.policy is None:
            raise ValueError("soft operator needs an explicit policy")
        if self.policy is not None:
            pol = np.asarray(self.policy, dtype=np.float64)
            if np.max(np.abs(pol.sum(axis=1) - 1.0)) > 1e-10 or np.any(pol < 0.0):
                raise ValueError("policy rows must be distributions")
            object.__setattr__(self, "policy", pol)


def on_policy(policy: np.ndarray | None = None, p: int = 2, c: float = 1.0) -> OperatorSpec:
    return OperatorSpec("on_policy", policy=policy, p=p, c=c)


def optimal(p: int = 2, c: float = 1.0) -> OperatorSpec:
    return OperatorSpec("optimal", p=p, c=c)


def diminishing_temp(eps_k: float, p: int = 2, c: float = 1.0) -> OperatorSpec:
    return OperatorSpec("diminishing_temp", eps_k=eps_k, p=p, c=c)


def soft(policy: np.ndarray, c: float = 1.0) -> OperatorSpec:
    return OperatorSpec("soft", policy=policy, c=c)


def as_q_table(q, mdp: DiscreteMdp) -> np.ndarray:
    """Materialise Q over the whole grid from a table or an approximator."""
    if isinstance(q, np.ndarray):
        if q.shape != (mdp.n_states, mdp.n_actions):
            raise ValueError("Q table shape does not match the MDP")
        return np.asarray(q, dtype=np.float64)
    table = getattr(q, "table", None)
    if table is not None and table.shape == (mdp.n_states, mdp.n_actions):
        return np.array(table, dtype=np.float64)
    return np.array([
        [q.value((s, a)) for a in range(mdp.n_actions)] for s in range(mdp.n_states)
    ])


def grad_table(q, mdp: DiscreteMdp) -> np.ndarray:
    """Stack parameter gradients over the grid: [S, A, n_params]."""
    return np.stack([
        np.stack([q.grad((s, a)) for a in range(mdp.n_actions)])
        for s in range(mdp.n_states)
    ])


def expected_next_values(mdp: DiscreteMdp, per_state_values: np.ndarray) -> np.ndarray:
    """E_{s' ~ p(.|s,a)}[ v(s') ] for every pair, as an [S, A] array."""
    return np.einsum("sat,t->sa", mdp.transition, per_state_values)


def greedy_values(q_table: np.ndarray) -> np.ndarray:
    """max_a Q(s, a), taken at the lowest-index argmax for exact tie policy."""
    idx = np.argmax(q_table, axis=1)
    return q_table[np.arange(q_table.shape[0]), idx]


def apply_operator(op: OperatorSpec, q, mdp: DiscreteMdp) -> np.ndarray:
    """One exact expected backup; returns a value per state-action pair."""
    q_table = as_q_table(q, mdp)
    if op.kind == "optimal":
        next_v = greedy_values(q_table)
    elif op.kind == "on_policy":
        pol = op.policy
        if pol is None:
            eps = solve_self_consistent_eps(q, mdp, c=op.c, p=op.p)
            pol = np.stack([policy_probs_from_values(q_table[s], eps)
                            for s in range(mdp.n_states)])
        next_v = np.einsum("ta,ta->t", pol, q_table)
    elif op.kind == "diminishing_temp":
        pol = np.stack([softmax_from_values(q_table[s], op.eps_k)
                        for s in range(mdp.n_states)])
        next_v = np.einsum("ta,ta->t", pol, q_table)
    elif op.kind == "soft":
        pol = op.policy
        if np.any(pol <= 0.0):
            raise ValueError("soft backup needs a strictly positive policy")
        next_v = np.einsum("ta,ta->t", pol, q_table - op.c * np.log(pol))
    else:  # pragma: no cover - guarded in OperatorSpec
        raise ValueError(op.kind)
    return mdp.reward + mdp.gamma * expected_next_values(mdp, next_v)


@dataclass(frozen=True)
class ResidualReport:
    """Residual error and the per-pair residuals behind it."""

    epsilon: float
    beta: np.ndarray  # [S, A]
    c: float
    p: int

    def __post_init__(self):
        expected = (self.c / self.p) * float(np.mean(np.abs(self.beta) ** self.p))
        if not np.isclose(self.epsilon, expected, rtol=1e-12, atol=1e-14):
            raise ValueError("epsilon is inconsistent with the residual vector")


def residual_error(q, op: OperatorSpec, mdp: DiscreteMdp) -> ResidualReport:
    """eps = (c/p) * mean_h |T Q(h) - Q(h)|^p over the uniform grid measure."""
    q_table = as_q_table(q, mdp)
    beta = apply_operator(op, q_table, mdp) - q_table
    epsilon = (op.c / op.p) * float(np.mean(np.abs(beta) ** op.p))
    return ResidualReport(epsilon, beta, op.c, op.p)


def solve_self_consistent_eps(q, mdp: DiscreteMdp, c: float = 1.0, p: int = 2,
                              tol: float = 1e-10, max_iters: int = 10_000) -> float:
    """Fixed point of eps -> residual under the softmax policy at eps.

    The temperature defines the policy and the policy defines the residual, so
    the consistent value is found by iteration; when successive steps
    oscillate, the update is damped by one half.  Temperatures below the floor
    fall back to the greedy policy.
    """
    q_table = as_q_table(q, mdp)

    def residual_at(eps: float) -> float:
        pol = np.stack([policy_probs_from_values(q_table[s], eps)
                        for s in range(mdp.n_states)])
        return residual_error(q_table, on_policy(pol, p=p, c=c), mdp).epsilon

    eps = 1.0
    prev_delta = 0.0
    for _ in range(max_iters):
        new = residual_at(eps)
        delta = new - eps
        if abs(delta) < tol:
            return new
        if prev_delta != 0.0 and np.sign(delta) != np.sign(prev_delta):
            new = 0.5 * (eps + new)
            delta = new - eps
        prev_delta = delta
        eps = new
    raise ConvergenceError(
        f"self-consistent temperature did not settle within {max_iters} iterations"
    )


def residual_grad_direct(q, op: OperatorSpec, mdp: DiscreteMdp,
                         batch: list | None = None) -> np.ndarray:
    """Gradient with the backup treated as a frozen target:
    c * E[(Q(h) - T Q(h)) grad Q(h)].

    The expectation is the uniform grid measure, or the empirical measure of
    ``batch`` (a list of (s, a) pairs) when given.
    """
    if op.p != 2:
        raise ValueError("direct residual gradients are defined for p = 2")
    q_table = as_q_table(q, mdp)
    target = apply_operator(op, q_table, mdp)
    if batch is None:
        pairs = [(s, a) for s in range(mdp.n_states) for a in range(mdp.n_actions)]
    else:
        pairs = list(batch)
    grad = np.zeros(q.params.size)
    for s, a in pairs:
        grad += (q_table[s, a] - target[s, a]) * q.grad((s, a))
    return op.c * grad / len(pairs)


def residual_grad_twk(q, eps_k: float, mdp: DiscreteMdp, c: float = 1.0) -> np.ndarray:
    """Full gradient of the fixed-temperature residual, differentiating
    through the softmax target policy.

    With p_k(a|s) = softmax(Q(s,.) / eps_k), the soft next-state value is
    v(s') = E_{p_k}[Q(s', .)] and its parameter gradient picks up both the
    direct dQ term and the policy-movement term
    ( E_{p_k}[Q dQ] - E_{p_k}[Q] E_{p_k}[dQ] ) / eps_k.
    """
    if eps_k <= 0.0:
        raise ValueError("eps_k must be positive")
    q_table = as_q_table(q, mdp)
    grads = grad_table(q, mdp)  # [S, A, F]

    pol = np.stack([softmax_from_values(q_table[s], eps_k)
                    for s in range(mdp.n_states)])
    mean_grad = np.einsum("sa,saf->sf", pol, grads)
    mean_q = np.einsum("sa,sa->s", pol, q_table)
    mean_qgrad = np.einsum("sa,sa,saf->sf", pol, q_table, grads)
    dv = (mean_qgrad - mean_q[:, None] * mean_grad) / eps_k + mean_grad  # [S, F]

    beta = mdp.reward + mdp.gamma * expected_next_values(mdp, mean_q) - q_table
    dbeta = mdp.gamma * np.einsum("sat,tf->saf", mdp.transition, dv) - grads
    return c * np.einsum("sa,saf->f", beta, dbeta) / beta.size


def projected_residual_linear(q_linear, op: OperatorSpec, mdp: DiscreteMdp,
                              cond_limit: float = 1e12) -> float:
    """Residual projected onto the span of the feature map (linear Q only):
    eps_proj = 1/2 E[beta b]^T E[b b^T]^{-1} E[beta b].
    """
    feats = grad_table(q_linear, mdp)  # [S, A, F]; for linear Q these are features
    b = feats.reshape(-1, feats.shape[-1])
    beta = residual_error(q_linear, op, mdp).beta.reshape(-1)
    n = b.shape[0]
    second_moment = b.T @ b / n
    cond = float(np.linalg.cond(second_moment))
    if not np.isfinite(cond) or cond > cond_limit:
        raise SingularFeatureMatrix(cond)
    g = b.T @ beta / n
    return 0.5 * float(g @ np.linalg.solve(second_moment, g))


@dataclass(frozen=True)
class GtdState:
    zeta: np.ndarray
    weights: np.ndarray
    step: int = 0


def _gtd_structure(q_linear, op: OperatorSpec, mdp: DiscreteMdp):
    if op.kind != "on_policy" or op.policy is None:
        raise ValueError("two-timescale updates need an explicit fixed policy")
    feats = grad_table(q_linear, mdp).reshape(mdp.n_states * mdp.n_actions, -1)
    # Expected next feature under the transition kernel and the fixed policy.
    state_feats = np.einsum("ta,taf->tf", op.policy,
                            feats.reshape(mdp.n_states, mdp.n_actions, -1))
    next_feats = np.einsum("sat,tf->saf", mdp.transition, state_feats)
    next_feats = next_feats.reshape(feats.shape)
    rewards = mdp.reward.reshape(-1)
    return feats, next_feats, rewards


def gtd_step(state: GtdState, q_linear, op: OperatorSpec, mdp: DiscreteMdp,
             alpha_zeta: float, alpha_weights: float) -> GtdState:
    """One expected two-timescale update of the auxiliary weights and the
    linear Q weights; the auxiliary step size must be the slower one.
    """
    if not alpha_zeta < alpha_weights:
        raise ValueError("auxiliary step size must be smaller than the critic's")
    b, b_next, rewards = _gtd_structure(q_linear, op, mdp)
    n = b.shape[0]
    beta = rewards + mdp.gamma * (b_next @ state.weights) - b @ state.weights
    zeta = state.zeta + alpha_zeta * ((beta - b @ state.zeta) @ b) / n
    correction = (b - mdp.gamma * b_next).T @ (b @ state.zeta) / n
    weights = state.weights + alpha_weights * correction
    return GtdState(zeta, weights, state.step + 1)


def run_gtd(q_linear, op: OperatorSpec, mdp: DiscreteMdp,
            alpha_zeta: float = 0.05, alpha_weights: float = 0.2,
            tol: float = 1e-12, max_iters: int = 200_000) -> GtdState:
    """Iterate expected updates until E[beta b] vanishes (the TD fixed point)."""
    if not alpha_zeta < alpha_weights:
        raise ValueError("auxiliary step size must be smaller than the critic's")
    b, b_next, rewards = _gtd_structure(q_linear, op, mdp)
    n = b.shape[0]
    second_moment = b.T @ b / n
    diff = (b - mdp.gamma * b_next).T @ b / n  # E[(b - gamma b') b^T]
    zeta = np.zeros(q_linear.params.size)
    weights = q_linear.weights.copy()
    for step in range(1, max_iters + 1):
        beta_b = (rewards + mdp.gamma * (b_next @ weights) - b @ weights) @ b / n
        if np.max(np.abs(beta_b)) < tol:
            return GtdState(zeta, weights, step - 1)
        zeta = zeta + alpha_zeta * (beta_b - second_moment @ zeta)
        weights = weights + alpha_weights * (diff @ zeta)
    raise ConvergenceError(f"two-timescale updates did not converge in {max_iters} steps")


@dataclass(frozen=True)
class IncrementalPoint:
    eps_k: float
    eps_wk: float
    gap: float


def incremental_limit(q, mdp: DiscreteMdp, eps_schedule, c: float = 1.0,
                      p: int = 2) -> list[IncrementalPoint]:
    """Track eps_{w,k} = (c/p) mean |T_k Q - Q|^p + eps_k along a temperature
    schedule and its gap to the greedy-backup residual it converges to.
    """
    eps_schedule = [float(e) for e in eps_schedule]
    if any(e <= 0.0 for e in eps_schedule):
        raise ValueError("schedule temperatures must be positive")
    target_eps = residual_error(q, optimal(p=p, c=c), mdp).epsilon
    trace = []
    for eps_k in eps_schedule:
        rr = residual_error(q, diminishing_temp(eps_k, p=p, c=c), mdp)
        eps_wk = rr.epsilon + eps_k
        trace.append(IncrementalPoint(eps_k, eps_wk, abs(rr.epsilon - target_eps)))
    return trace
