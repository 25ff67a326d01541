"""Exact EM on tabular MDPs.

With complete alternating steps and exact table representation, the
critic-evaluation / actor-improvement cycle reduces to classical policy
iteration when the backup target tracks the current policy, and to value
iteration style greedy backups when the target is frozen between cycles.
Both reductions are implemented here together with the exact solvers they
are checked against.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import bellman
from .mdp import DiscreteMdp


class PolicyIterationError(RuntimeError):
    """Policy iteration failed to stabilise within the iteration cap."""


@dataclass(frozen=True)
class ExactPolicy:
    """Row-stochastic action distribution table with a determinism flag."""

    probs: np.ndarray  # [S, A]
    deterministic: bool = False

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if np.any(probs < 0.0) or np.max(np.abs(probs.sum(axis=1) - 1.0)) > 1e-12:
            raise ValueError("policy rows must sum to 1 within 1e-12")
        object.__setattr__(self, "probs", probs)

    @staticmethod
    def uniform(n_states: int, n_actions: int) -> "ExactPolicy":
        return ExactPolicy(np.full((n_states, n_actions), 1.0 / n_actions))

    @staticmethod
    def greedy(q_table: np.ndarray) -> "ExactPolicy":
        """One-hot rows at the lowest-index argmax."""
        q_table = np.asarray(q_table, dtype=np.float64)
        probs = np.zeros_like(q_table)
        probs[np.arange(q_table.shape[0]), np.argmax(q_table, axis=1)] = 1.0
        return ExactPolicy(probs, deterministic=True)

    def greedy_actions(self) -> np.ndarray:
        return np.argmax(self.probs, axis=1)


def policy_fingerprint(policy: ExactPolicy) -> str:
    """Short stable hash of the greedy action profile."""
    data = policy.greedy_actions().astype(np.int64).tobytes()
    return hashlib.sha1(data).hexdigest()[:12]


def policy_evaluation_exact(mdp: DiscreteMdp, policy: ExactPolicy) -> np.ndarray:
    """Exact Q of a policy from the linear fixed-point system.

    Solves the state-value system (I - gamma P_pi) v = r_pi and reconstructs
    Q = r + gamma P v, then asserts the defining backup identity to 1e-10.
    """
    p_pi = np.einsum("sat,sa->st", mdp.transition, policy.probs)
    r_pi = np.einsum("sa,sa->s", mdp.reward, policy.probs)
    system = np.eye(mdp.n_states) - mdp.gamma * p_pi
    v = np.linalg.solve(system, r_pi)  # nonsingular for gamma < 1
    q = mdp.reward + mdp.gamma * bellman.expected_next_values(mdp, v)
    backup = bellman.apply_operator(bellman.on_policy(policy.probs), q, mdp)
    residual = float(np.max(np.abs(backup - q)))
    if residual >= 1e-10:
        raise AssertionError(f"policy evaluation residual {residual:.3e} exceeds 1e-10")
    return q


def value_iteration_oracle(mdp: DiscreteMdp, tol: float = 1e-8):
    """Greedy-backup iteration to a contraction-bounded stopping rule.

    Returns (Q, greedy policy, sweep count).  The threshold
    tol * (1 - gamma) / (2 gamma) bounds the sup-norm error of the returned
    table by roughly tol / 2.
    """
    threshold = tol if mdp.gamma == 0.0 else tol * (1.0 - mdp.gamma) / (2.0 * mdp.gamma)
    q = np.zeros((mdp.n_states, mdp.n_actions))
    op = bellman.optimal()
    for sweep in range(1, 1_000_000):
        new = bellman.apply_operator(op, q, mdp)
        delta = float(np.max(np.abs(new - q)))
        q = new
        if delta < threshold:
            return q, ExactPolicy.greedy(q), sweep
    raise RuntimeError("unreachable for gamma < 1")  # pragma: no cover


@dataclass(frozen=True)
class EmIterate:
    q: np.ndarray
    policy: ExactPolicy
    value: np.ndarray  # per-state value of the evaluated policy


def em_policy_iteration(mdp: DiscreteMdp, max_iters: int = 1000,
                        initial_policy: ExactPolicy | None = None) -> list[EmIterate]:
    """Alternate exact policy evaluation with greedy improvement.

    Each cycle drives the on-policy residual to zero for the current policy
    and then takes the zero-temperature (one-hot) actor; iteration stops the
    first time the greedy profile repeats.
    """
    policy = initial_policy or ExactPolicy.uniform(mdp.n_states, mdp.n_actions)
    trace: list[EmIterate] = []
    for _ in range(max_iters):
        q = policy_evaluation_exact(mdp, policy)
        value = np.einsum("sa,sa->s", policy.probs, q)
        new_policy = ExactPolicy.greedy(q)
        trace.append(EmIterate(q, new_policy, value))
        if policy.deterministic and np.array_equal(
            policy.greedy_actions(), new_policy.greedy_actions()
        ):
            return trace
        policy = new_policy
    raise PolicyIterationError(f"policy did not stabilise within {max_iters} iterations")


def em_q_learning(mdp: DiscreteMdp, q0: np.ndarray, n_steps: int,
                  initial_policy: ExactPolicy | None = None) -> list[np.ndarray]:
    """Frozen-target EM cycle on tables.

    The first update backs up the initial table under the initial policy;
    every later cycle takes the one-hot greedy actor of the previous table
    and backs up under it, which coincides with the greedy backup exactly.
    Returns the table sequence [q0, q1, ..., q_{n_steps}].
    """
    q = np.asarray(q0, dtype=np.float64)
    if q.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError("q0 shape does not match the MDP")
    policy = initial_policy or ExactPolicy.uniform(mdp.n_states, mdp.n_actions)
    trace = [q.copy()]
    for step in range(n_steps):
        q = bellman.apply_operator(bellman.on_policy(policy.probs), q, mdp)
        trace.append(q.copy())
        policy = ExactPolicy.greedy(q)
    return trace
