"""Entropy-regularised comparison machinery.

On the two-branch construction from :mod:`varac.mdp` the entropy-augmented
objective admits a closed-form optimal start-state action probability.  This
module evaluates that objective, maximises it numerically as an independent
check, runs entropy-augmented policy evaluation on arbitrary tabular MDPs,
and trains a soft-target baseline for side-by-side traces.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import actor_critic
from .mdp import ContinuousEnv, CounterexampleParams, DiscreteMdp, build_counterexample

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


class BracketError(RuntimeError):
    """The coarse scan found no interior maximum to bracket."""


@dataclass(frozen=True)
class CounterexamplePolicy:
    """Start-state action split p1 and the branch distribution at the split
    state; interior probabilities only, so every log is defined."""

    p1: float
    p1i: np.ndarray

    def __post_init__(self):
        p1i = np.asarray(self.p1i, dtype=np.float64)
        if not (0.0 < self.p1 < 1.0):
            raise ValueError("p1 must lie strictly inside (0, 1)")
        if np.any(p1i <= 0.0) or abs(p1i.sum() - 1.0) > 1e-12:
            raise ValueError("p1i must be a strictly positive distribution")
        object.__setattr__(self, "p1i", p1i)


def j_merl_counterexample(pol: CounterexamplePolicy, k1: int, c: float,
                          gamma: float) -> float:
    """Entropy-augmented return of the two-branch construction in the long
    chain idealisation:

    (1 - p1) (1 - c log(1 - p1)) - p1 (c log p1 + gamma c sum_i p1i log p1i)
    """
    if len(pol.p1i) != k1:
        raise ValueError("p1i length must equal k1")
    p1 = pol.p1
    branch_term = float(np.sum(pol.p1i * np.log(pol.p1i)))
    return (1.0 - p1) * (1.0 - c * np.log(1.0 - p1)) \
        - p1 * (c * np.log(p1) + gamma * c * branch_term)


@dataclass(frozen=True)
class ClosedFormOptimum:
    p1: float
    mode_flips: bool  # true exactly when k1^(-gamma) e^(1/c) < 1, i.e. p1 > 1/2


def optimal_p1_closed(k1: int, gamma: float, c: float) -> ClosedFormOptimum:
    """p1* = 1 / (k1^(-gamma) exp(1/c) + 1), with the mode-flip indicator."""
    if k1 < 1 or c <= 0.0:
        raise ValueError("need k1 >= 1 and c > 0")
    ratio = float(k1) ** (-gamma) * np.exp(1.0 / c)
    return ClosedFormOptimum(1.0 / (ratio + 1.0), bool(ratio < 1.0))


def _objective(p1: float, k1: int, c: float, gamma: float) -> float:
    pol = CounterexamplePolicy(p1, np.full(k1, 1.0 / k1))
    return j_merl_counterexample(pol, k1, c, gamma)


def optimal_p1_numeric(k1: int, gamma: float, c: float, tol: float = 1e-8) -> float:
    """Maximise the objective over p1 by golden-section search.

    The branch distribution is held uniform (which maximises its term).  A
    coarse scan brackets the maximum first and fails loudly if the largest
    sample sits on the scan boundary.  One three-point parabolic polish
    follows the golden-section phase because value comparisons alone bottom
    out near sqrt(machine eps) around a smooth maximum.
    """
    if tol <= 0.0:
        raise ValueError("tol must be positive")
    lo_bound, hi_bound = 1e-12, 1.0 - 1e-12
    # Coarse scan in log-odds so maxima hugging either boundary still get an
    # interior three-point bracket.
    scan = 1.0 / (1.0 + np.exp(-np.linspace(-30.0, 30.0, 257)))
    values = np.array([_objective(p, k1, c, gamma) for p in scan])
    peak = int(np.argmax(values))
    if peak == 0 or peak == len(scan) - 1:
        raise BracketError("no interior maximum; objective not unimodal on (0, 1)")
    lo, hi = scan[peak - 1], scan[peak + 1]

    x1 = hi - GOLDEN * (hi - lo)
    x2 = lo + GOLDEN * (hi - lo)
    f1, f2 = _objective(x1, k1, c, gamma), _objective(x2, k1, c, gamma)
    while hi - lo > 1e-12:
        if f1 < f2:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + GOLDEN * (hi - lo)
            f2 = _objective(x2, k1, c, gamma)
        else:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - GOLDEN * (hi - lo)
            f1 = _objective(x1, k1, c, gamma)
    center = 0.5 * (lo + hi)

    # Parabolic vertex through three points around the bracket midpoint.  The
    # spacing shrinks with the distance to the nearer boundary, where the
    # third derivative of the objective blows up and would bias the fit.
    for _ in range(2):
        h = min(1e-5, 0.001 * center, 0.001 * (1.0 - center))
        fa = _objective(center - h, k1, c, gamma)
        fb = _objective(center, k1, c, gamma)
        fc = _objective(center + h, k1, c, gamma)
        denom = fa - 2.0 * fb + fc
        if denom < 0.0:
            center = center + 0.5 * h * (fa - fc) / denom
    return float(np.clip(center, lo_bound, hi_bound))


def soft_policy_evaluation(mdp: DiscreteMdp, policy_table: np.ndarray, c: float = 1.0,
                           tol: float = 1e-10, max_iters: int = 1_000_000) -> np.ndarray:
    """Fixed point of the entropy-augmented backup
    Q <- r + gamma E_{s'} E_{a' ~ pi}[ Q(s', a') - c log pi(a'|s') ].
    """
    policy_table = np.asarray(policy_table, dtype=np.float64)
    if np.any(policy_table <= 0.0):
        raise ValueError("entropy-augmented evaluation needs a strictly positive policy")
    log_pi = np.log(policy_table)
    q = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(max_iters):
        inner = np.einsum("ta,ta->t", policy_table, q - c * log_pi)
        new = mdp.reward + mdp.gamma * np.einsum("sat,t->sa", mdp.transition, inner)
        delta = float(np.max(np.abs(new - q)))
        q = new
        if delta < tol:
            return q
    raise RuntimeError("soft evaluation did not converge")  # pragma: no cover


def monte_carlo_jmerl(params: CounterexampleParams, pol: CounterexamplePolicy,
                      n_episodes: int, rng: np.random.Generator):
    """Sampled entropy-augmented return on the finite construction.

    Rollouts follow p1 / p1i at the two decision states and the uniform
    policy elsewhere, accumulate gamma^t (r_t + c H_t) until absorption, and
    quantify how far the finite chain sits from the long-chain closed form.
    Returns (mean, standard error).
    """
    mdp = build_counterexample(params)
    k1, c, gamma = params.k1, params.c, params.gamma
    n_actions = mdp.n_actions
    last = mdp.n_states - 1

    uniform_entropy = np.log(n_actions)
    h0 = -(pol.p1 * np.log(pol.p1) + (1.0 - pol.p1) * np.log(1.0 - pol.p1))
    h1 = -float(np.sum(pol.p1i * np.log(pol.p1i)))

    returns = np.zeros(n_episodes)
    for ep in range(n_episodes):
        state, t, total = 0, 0, 0.0
        while state != last:
            if state == 0:
                action = 0 if rng.random() < pol.p1 else 1
                entropy = h0
            elif state == 1:
                action = 2 + int(rng.choice(k1, p=pol.p1i))
                entropy = h1
            else:
                action = int(rng.integers(n_actions))
                entropy = uniform_entropy
            total += gamma ** t * (mdp.reward[state, action] + c * entropy)
            state = int(np.argmax(mdp.transition[state, action]))
            t += 1
        returns[ep] = total
    stderr = float(np.std(returns) / np.sqrt(n_episodes)) if n_episodes > 1 else 0.0
    return float(np.mean(returns)), stderr


def train_soft_baseline(env: ContinuousEnv, config: actor_critic.TrainConfig,
                        seed: int) -> actor_critic.TrainResult:
    """Same loop as the main variants but the state-value target carries the
    entropy bonus, so bootstrapped critic targets accumulate future entropy."""
    return actor_critic.train(env, config, "soft", seed)
