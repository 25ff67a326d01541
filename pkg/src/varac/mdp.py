"""Tabular MDPs, a max-entropy mismatch construction, and toy continuous tasks.

A discrete MDP is stored as dense numpy arrays: a transition tensor
``p[s, a, s']``, a reward matrix ``r[s, a]``, an initial state distribution
and a discount factor.  State-action pairs are plain ``(s, a)`` index tuples
for discrete problems and ``(state_vector, action_vector)`` for continuous
ones.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

ROW_SUM_ATOL = 1e-12


class StateAction(NamedTuple):
    """A state-action pair; indices for tabular problems, vectors otherwise."""

    state: object
    action: object


@dataclass(frozen=True)
class DiscreteMdp:
    """Finite MDP with dense transition / reward arrays.

    Invariants enforced at construction: stochastic transition rows,
    normalised initial distribution, finite rewards and gamma in [0, 1).
    """

    transition: np.ndarray  # [S, A, S']
    reward: np.ndarray  # [S, A]
    initial_dist: np.ndarray  # [S]
    gamma: float

    def __post_init__(self):
        p = np.asarray(self.transition, dtype=np.float64)
        r = np.asarray(self.reward, dtype=np.float64)
        d0 = np.asarray(self.initial_dist, dtype=np.float64)
        if p.ndim != 3 or p.shape[0] != p.shape[2]:
            raise ValueError(f"transition tensor must be [S, A, S], got {p.shape}")
        if r.shape != p.shape[:2]:
            raise ValueError(f"reward shape {r.shape} does not match {p.shape[:2]}")
        if d0.shape != (p.shape[0],):
            raise ValueError("initial_dist length must equal the state count")
        if np.any(p < 0.0):
            raise ValueError("negative transition probability")
        row_sums = p.sum(axis=2)
        if np.max(np.abs(row_sums - 1.0)) > ROW_SUM_ATOL:
            raise ValueError("transition rows must sum to 1 within 1e-12")
        if abs(d0.sum() - 1.0) > ROW_SUM_ATOL or np.any(d0 < 0.0):
            raise ValueError("initial_dist must be a probability vector")
        if not np.all(np.isfinite(r)):
            raise ValueError("rewards must be finite")
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError("gamma must lie in [0, 1)")
        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "initial_dist", d0)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def to_json(self) -> str:
        doc = {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "initial_dist": self.initial_dist.tolist(),
            "gamma": self.gamma,
        }
        return json.dumps(doc)

    @staticmethod
    def from_json(text: str) -> "DiscreteMdp":
        doc = json.loads(text)
        return DiscreteMdp(
            transition=np.asarray(doc["transition"], dtype=np.float64),
            reward=np.asarray(doc["reward"], dtype=np.float64),
            initial_dist=np.asarray(doc["initial_dist"], dtype=np.float64),
            gamma=float(doc["gamma"]),
        )


@dataclass(frozen=True)
class CounterexampleParams:
    """Sizes and constants for the two-branch mismatch MDP."""

    k1: int
    k2: int
    gamma: float
    c: float = 1.0

    def __post_init__(self):
        if self.k1 < 1 or self.k2 < 1:
            raise ValueError("k1 and k2 must be at least 1")
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError("gamma must lie in [0, 1)")
        if self.c <= 0.0:
            raise ValueError("c must be positive")


def build_counterexample(params: CounterexampleParams) -> DiscreteMdp:
    """Construct the deterministic MDP on which greedy and entropy-regularised
    optima pick different actions at the start state.

    Layout: states are ordered ``s0..s4``, then the k1 branch states, then the
    chain ``s5..s(5+k2)``; actions are ``a1, a2`` followed by the k1 branch
    actions.  The single nonzero reward is 1 at ``(s0, a2)``.  Actions the
    construction leaves unused at a state alias to the lowest-indexed defined
    action there; chain states advance regardless of action and the last chain
    state absorbs with zero reward.
    """
    k1, k2 = params.k1, params.k2
    n_states = 6 + k1 + k2
    n_actions = 2 + k1

    s1 = 1
    branch = lambda i: 5 + i  # s1^(i+1) for i in 0..k1-1
    chain = lambda j: k1 + j  # s_j for j in 5..5+k2
    last = n_states - 1

    p = np.zeros((n_states, n_actions, n_states))
    r = np.zeros((n_states, n_actions))

    # s0: a1 and a2 both move to s1; branch actions alias to a1.
    p[0, :, s1] = 1.0
    r[0, 1] = 1.0

    # s1: branch action i selects branch state i; a1 and a2 alias to branch 0.
    for a in (0, 1):
        p[s1, a, branch(0)] = 1.0
    for i in range(k1):
        p[s1, 2 + i, branch(i)] = 1.0

    # s2 -> s3 -> s4 -> s5 regardless of action.
    p[2, :, 3] = 1.0
    p[3, :, 4] = 1.0
    p[4, :, chain(5)] = 1.0

    # Branch states all funnel into s5.
    for i in range(k1):
        p[branch(i), :, chain(5)] = 1.0

    # Chain advances; the tail state absorbs.
    for j in range(5, 5 + k2):
        p[chain(j), :, chain(j + 1)] = 1.0
    p[last, :, last] = 1.0

    d0 = np.zeros(n_states)
    d0[0] = 1.0
    return DiscreteMdp(transition=p, reward=r, initial_dist=d0, gamma=params.gamma)


def random_mdp(n_states: int, n_actions: int, seed: int, gamma: float) -> DiscreteMdp:
    """Seeded random MDP with Dirichlet transition rows and rewards in [0.1, 1].

    The reward floor keeps optimal values strictly positive, which several
    residual-error results assume.
    """
    if n_states < 1 or n_actions < 1:
        raise ValueError("need at least one state and one action")
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    r = rng.uniform(0.1, 1.0, size=(n_states, n_actions))
    d0 = rng.dirichlet(np.ones(n_states))
    return DiscreteMdp(transition=p, reward=r, initial_dist=d0, gamma=gamma)


def sample_transition(mdp: DiscreteMdp, h, rng: np.random.Generator):
    """Draw ``(next_state, reward)`` for a state-action pair."""
    s, a = h
    if not (0 <= s < mdp.n_states and 0 <= a < mdp.n_actions):
        raise IndexError(f"state-action ({s}, {a}) out of range")
    next_state = int(rng.choice(mdp.n_states, p=mdp.transition[s, a]))
    return next_state, float(mdp.reward[s, a])


@dataclass(frozen=True)
class ContinuousEnv:
    """Small analytic control task with a box action space.

    ``reset_fn(rng)`` returns an initial state vector; ``step_fn(state,
    action, rng)`` returns ``(next_state, reward)``.  Actions are clipped to
    the box before they touch the dynamics, rewards are finite by
    construction, and all randomness flows through the caller's generator.
    """

    name: str
    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    horizon: int
    reset_fn: Callable[[np.random.Generator], np.ndarray] = field(repr=False)
    step_fn: Callable[[np.ndarray, np.ndarray, np.random.Generator], tuple] = field(repr=False)

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")

    def clip_action(self, action: np.ndarray) -> np.ndarray:
        return np.clip(np.asarray(action, dtype=np.float64), self.action_low, self.action_high)

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        return self.reset_fn(rng)

    def step(self, state: np.ndarray, action: np.ndarray, rng: np.random.Generator):
        return self.step_fn(state, self.clip_action(action), rng)


def make_point_mass(horizon: int = 30) -> ContinuousEnv:
    """Damped point on a bounded track; reward -(position^2 + 0.01 action^2).

    The transition is deterministic damped-integrator dynamics plus a small
    seeded velocity perturbation; the track has walls at +-2 (contact zeroes
    the velocity) and resets draw the initial position uniformly from
    [-0.5, 0.5].
    """
    dt = 0.1
    damping = 0.9
    noise = 0.01
    wall = 2.0

    def reset(rng: np.random.Generator) -> np.ndarray:
        return np.array([rng.uniform(-0.5, 0.5), 0.0])

    def step(state, action, rng: np.random.Generator):
        pos, vel = float(state[0]), float(state[1])
        a = float(action[0])
        reward = -(pos * pos + 0.01 * a * a)
        new_vel = damping * vel + dt * a + noise * rng.standard_normal()
        new_pos = pos + dt * new_vel
        if abs(new_pos) > wall:
            new_pos = np.clip(new_pos, -wall, wall)
            new_vel = 0.0
        return np.array([new_pos, new_vel]), reward

    return ContinuousEnv(
        name="point_mass",
        state_dim=2,
        action_dim=1,
        action_low=np.array([-1.0]),
        action_high=np.array([1.0]),
        horizon=horizon,
        reset_fn=reset,
        step_fn=step,
    )


BANDIT_OPTIMUM = 0.4


def make_continuous_bandit() -> ContinuousEnv:
    """One-state task with reward exp(-8 (a - 0.4)^2); the optimum is known."""

    def reset(rng: np.random.Generator) -> np.ndarray:
        return np.zeros(1)

    def step(state, action, rng: np.random.Generator):
        a = float(action[0])
        reward = float(np.exp(-8.0 * (a - BANDIT_OPTIMUM) ** 2))
        return np.zeros(1), reward

    return ContinuousEnv(
        name="bandit",
        state_dim=1,
        action_dim=1,
        action_low=np.array([-1.0]),
        action_high=np.array([1.0]),
        horizon=1,
        reset_fn=reset,
        step_fn=step,
    )
