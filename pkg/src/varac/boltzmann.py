"""Softmax action distributions with a residual-error temperature.

Covers the per-state policy, the normalised joint over the whole
state-action grid, the Bayes action-posterior route that reproduces it, the
evidence-lower-bound decomposition, and the numerical temperature-to-zero
limit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize
from scipy.special import xlogy

EPS_FLOOR = 1e-8
TIE_ATOL = 1e-12


class TieError(ValueError):
    """Raised when the greedy action is not unique within 1e-12."""


@dataclass(frozen=True)
class UniformGrid:
    """Midpoint quadrature grid over a closed interval (one action dim)."""

    low: float
    high: float
    n: int = 201

    def points(self) -> np.ndarray:
        if self.n < 1:
            raise ValueError("grid needs at least one point")
        width = (self.high - self.low) / self.n
        return self.low + (np.arange(self.n) + 0.5) * width


def support_values(q, state, support) -> np.ndarray:
    """Evaluate Q over an action support (index array or UniformGrid)."""
    if isinstance(support, UniformGrid):
        pts = support.points()
        return np.array([q.value((state, np.array([a]))) for a in pts])
    support = np.asarray(support)
    if support.size == 0:
        raise ValueError("empty action support")
    return np.array([q.value((state, int(a))) for a in support])


def softmax_from_values(values: np.ndarray, eps: float) -> np.ndarray:
    """Max-subtracted softmax of values / eps; requires eps > 0."""
    if eps <= 0.0:
        raise ValueError("temperature must be positive")
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("empty action support")
    z = (values - values.max()) / eps
    with np.errstate(under="ignore"):
        e = np.exp(z)
    return e / e.sum()


def greedy_one_hot(values: np.ndarray) -> np.ndarray:
    """Point mass on the lowest-index maximiser."""
    values = np.asarray(values, dtype=np.float64)
    probs = np.zeros(values.size)
    probs[int(np.argmax(values))] = 1.0
    return probs


def boltzmann_probs(q, state, eps: float, support) -> np.ndarray:
    """Softmax policy over the support at temperature eps (> 0)."""
    return softmax_from_values(support_values(q, state, support), eps)


def policy_probs_from_values(values: np.ndarray, eps: float) -> np.ndarray:
    """Softmax with a greedy fallback once eps drops below the floor."""
    if eps < EPS_FLOOR:
        return greedy_one_hot(values)
    return softmax_from_values(values, eps)


@dataclass(frozen=True)
class DiracTrace:
    argmax_index: int
    eps_values: np.ndarray
    tv_distances: np.ndarray


def dirac_limit(q, state, eps_sequence, support) -> DiracTrace:
    """Total-variation distance to the greedy point mass along a temperature
    schedule decreasing to zero.

    Rejects value vectors whose maximum is tied within 1e-12, since the limit
    is only a point mass for a unique maximiser.
    """
    eps_sequence = np.asarray(eps_sequence, dtype=np.float64)
    if np.any(eps_sequence <= 0.0):
        raise ValueError("temperatures must be strictly positive")
    if np.any(np.diff(eps_sequence) >= 0.0):
        raise ValueError("temperature schedule must be strictly decreasing")
    values = support_values(q, state, support)
    order = np.sort(values)
    if values.size > 1 and order[-1] - order[-2] <= TIE_ATOL:
        raise TieError("greedy action is tied within 1e-12")
    target = greedy_one_hot(values)
    tvs = np.array([
        0.5 * np.abs(softmax_from_values(values, eps) - target).sum()
        for eps in eps_sequence
    ])
    return DiracTrace(int(np.argmax(values)), eps_sequence, tvs)


@dataclass(frozen=True)
class JointBoltzmann:
    """Normalised distribution over the full state-action grid."""

    probs: np.ndarray  # [S, A]
    log_norm: float  # log sum of exp(Q / eps)

    def __post_init__(self):
        if abs(self.probs.sum() - 1.0) > 1e-10:
            raise ValueError("joint distribution must sum to 1 within 1e-10")


def joint_boltzmann(q_table: np.ndarray, eps: float) -> JointBoltzmann:
    if eps <= 0.0:
        raise ValueError("temperature must be positive")
    q_table = np.asarray(q_table, dtype=np.float64)
    m = q_table.max()
    with np.errstate(under="ignore"):
        e = np.exp((q_table - m) / eps)
    z = e.sum()
    log_norm = float(np.log(z) + m / eps)
    return JointBoltzmann(e / z, log_norm)


def bayes_action_posterior(q_table: np.ndarray, eps: float):
    """Posterior over actions from a Bernoulli achievement likelihood.

    The likelihood of the binary event at (s, a) is
    exp((Q(s,a) - max_a' Q(s,a')) / eps), the prior over the grid is uniform,
    and conditioning the joint posterior on the state recovers the softmax
    policy exactly.  Returns (per-state policy, likelihood, joint posterior).
    """
    if eps <= 0.0:
        raise ValueError("temperature must be positive")
    q_table = np.asarray(q_table, dtype=np.float64)
    with np.errstate(under="ignore"):
        likelihood = np.exp((q_table - q_table.max(axis=1, keepdims=True)) / eps)
    joint = likelihood / likelihood.sum()
    per_state = joint / joint.sum(axis=1, keepdims=True)
    return per_state, likelihood, joint


@dataclass(frozen=True)
class ElboDecomposition:
    value: float  # L
    log_norm: float  # log-normaliser of the joint
    kl: float  # KL(q_theta || joint)
    state_entropy: float  # entropy of the sampling distribution

    def identity_gap(self) -> float:
        return abs(self.value - (self.log_norm - self.kl - self.state_entropy))


def elbo_discrete(q_table: np.ndarray, eps: float, pi_table: np.ndarray,
                  d: np.ndarray) -> ElboDecomposition:
    """Evidence lower bound on a finite grid, plus its three-term split.

    L = E_d[ E_pi[Q]/eps + H(pi) ] and equals
    log_norm - KL(d*pi || joint) - H(d) exactly.
    """
    q_table = np.asarray(q_table, dtype=np.float64)
    pi_table = np.asarray(pi_table, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if np.max(np.abs(pi_table.sum(axis=1) - 1.0)) > 1e-10:
        raise ValueError("policy rows must sum to 1")
    if abs(d.sum() - 1.0) > 1e-10:
        raise ValueError("state distribution must sum to 1")
    if eps <= 0.0:
        raise ValueError("temperature must be positive")

    row_entropy = -xlogy(pi_table, pi_table).sum(axis=1)
    value = float(d @ ((pi_table * q_table).sum(axis=1) / eps + row_entropy))

    joint = joint_boltzmann(q_table, eps)
    q_joint = d[:, None] * pi_table
    with np.errstate(divide="ignore", invalid="ignore"):
        log_ratio = np.where(q_joint > 0.0, np.log(q_joint) - np.log(joint.probs), 0.0)
    kl = float((q_joint * log_ratio).sum())
    state_entropy = float(-xlogy(d, d).sum())
    return ElboDecomposition(value, joint.log_norm, kl, state_entropy)


def elbo_gaussian_single_state(q_of_action, eps: float, mu: float, sigma: float,
                               grid: UniformGrid) -> float:
    """Continuous-action bound for one state and a Gaussian variational policy.

    E_pi[Q]/eps comes from midpoint quadrature; the differential entropy
    log(sigma sqrt(2 pi e)) diverges to -inf as sigma -> 0, so the bound falls
    below any level when the policy collapses to a point at positive
    temperature.
    """
    if eps <= 0.0 or sigma <= 0.0:
        raise ValueError("temperature and sigma must be positive")
    pts = grid.points()
    width = (grid.high - grid.low) / grid.n
    pdf = np.exp(-0.5 * ((pts - mu) / sigma) ** 2) / (sigma * np.sqrt(2.0 * np.pi))
    weights = pdf * width
    qs = np.array([float(q_of_action(a)) for a in pts])
    expected_q = float(weights @ qs)
    entropy = float(np.log(sigma) + 0.5 * (1.0 + np.log(2.0 * np.pi)))
    return expected_q / eps + entropy


def fit_variational_policy(q_table: np.ndarray, eps: float, d: np.ndarray | None = None,
                           gtol: float = 1e-13) -> np.ndarray:
    """Maximise the bound over all row-stochastic policy tables numerically.

    Each state is an independent concave problem over the simplex (the state
    weight only scales it), solved over gauge-fixed logits with L-BFGS-B.
    The maximiser must coincide with the softmax policy; this routine is the
    optimisation-based oracle for that fact and never assumes it.
    """
    q_table = np.asarray(q_table, dtype=np.float64)
    n_states, n_actions = q_table.shape
    out = np.zeros_like(q_table)
    for s in range(n_states):
        qs = q_table[s] / eps

        def negative_objective(z_free):
            z = np.concatenate([[0.0], z_free])
            p = softmax_from_values(z, 1.0)
            f = p @ qs - xlogy(p, p).sum()
            # d/dz_i of the objective, then restricted to the free coords.
            avg_q = p @ qs
            entropy = -xlogy(p, p).sum()
            grad = p * (qs - avg_q) - p * (np.log(np.maximum(p, 1e-300)) + entropy)
            return -f, -grad[1:]

        res = optimize.minimize(
            negative_objective,
            np.zeros(n_actions - 1),
            jac=True,
            method="L-BFGS-B",
            options={"gtol": gtol, "ftol": 1e-16, "maxiter": 2000},
        )
        z = np.concatenate([[0.0], res.x])
        out[s] = softmax_from_values(z, 1.0)
    return out
