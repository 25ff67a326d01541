"""Variational actor-critic training on toy continuous tasks.

Two variants share one loop: "virel" keeps a constant entropy coefficient in
the policy loss, "beta" replaces it with a sampled critic-residual estimate
scaled by (1 - gamma) / r_avg so exploration tracks how badly the critic
currently fits.  A third internal mode, "soft", trains the state-value
baseline against an entropy-augmented target and is used as a comparison
point.

All gradients are computed by the explicit backward passes of the
approximators; targets and critics entering a loss are frozen exactly where
the loss definitions say so, which is what the finite-difference tests pin
down.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.special import xlogy

from .approximator import (
    LOG_2PI,
    Adam,
    GaussianPolicy,
    MlpQ,
    ValueMlp,
)
from .mdp import ContinuousEnv

EPS_FLOOR = 1e-8


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float  # already multiplied by the reward scale
    next_state: np.ndarray
    done: bool

    def __post_init__(self):
        if not (np.all(np.isfinite(self.state)) and np.all(np.isfinite(self.action))
                and np.isfinite(self.reward) and np.all(np.isfinite(self.next_state))):
            raise ValueError("transition fields must be finite")


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray


class ReplayBuffer:
    """Fixed-capacity ring buffer with uniform sampling over filled slots."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, state_dim))
        self.dones = np.zeros(capacity)
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def add(self, t: Transition) -> None:
        i = self._next
        self.states[i] = t.state
        self.actions[i] = t.action
        self.rewards[i] = t.reward
        self.next_states[i] = t.next_state
        self.dones[i] = float(t.done)
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample_indices(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self._size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return rng.integers(0, self._size, size=n)

    def gather(self, idx: np.ndarray) -> Batch:
        return Batch(
            self.states[idx].copy(),
            self.actions[idx].copy(),
            self.rewards[idx].copy(),
            self.next_states[idx].copy(),
            self.dones[idx].copy(),
        )


@dataclass
class TrainConfig:
    """Hyperparameters; defaults follow the reference table, with the loop
    and evaluation knobs the table leaves open filled in explicitly."""

    gamma: float = 0.99
    batch_size: int = 128
    net_width: int = 300
    lr_q: float = 3e-4
    lr_v: float = 3e-4
    lr_pi: float = 3e-4
    tau: float = 0.005
    lambda_beta: float | None = 4e-3  # None means adaptive (1 - gamma) / r_avg
    reward_scale: float = 1.0
    reward_offset: float = 0.0  # positivity shift; optimal-policy preserving
    n_eps_samples: int = 1024
    alpha: float = 0.2
    steps_per_eval: int = 1000
    max_path_length: int = 999
    c: float = 1.0
    total_steps: int = 20_000
    buffer_capacity: int = 100_000
    eval_episodes: int = 4
    log_std_init: float = -2.0

    def __post_init__(self):
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError("gamma must lie in [0, 1)")
        if not (0.0 < self.tau <= 1.0):
            raise ValueError("tau must lie in (0, 1]")
        for name in ("lr_q", "lr_v", "lr_pi", "reward_scale", "c"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if self.lambda_beta is not None and self.lambda_beta <= 0.0:
            raise ValueError("lambda_beta must be positive or None")
        for name in ("batch_size", "net_width", "n_eps_samples", "steps_per_eval",
                     "max_path_length", "total_steps", "buffer_capacity", "eval_episodes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.alpha < 0.0:
            raise ValueError("alpha must be nonnegative")


class RunningRewardAverage:
    """Exponential moving average of |reward| with a positive floor.

    Initialised at the first observed magnitude; the floor keeps the
    (1 - gamma) / r_avg scale finite on reward-free stretches.
    """

    def __init__(self, rate: float = 0.001, floor: float = 1e-3):
        self.rate = rate
        self.floor = floor
        self._value: float | None = None

    @property
    def value(self) -> float:
        if self._value is None:
            raise ValueError("no rewards observed yet")
        return max(self._value, self.floor)

    def update_batch(self, rewards: np.ndarray) -> None:
        r = np.abs(np.asarray(rewards, dtype=np.float64)).ravel()
        if r.size == 0:
            return
        if self._value is None:
            self._value = float(r[0])
            r = r[1:]
            if r.size == 0:
                return
        keep = (1.0 - self.rate) ** np.arange(r.size - 1, -1, -1)
        self._value = float(self._value * (1.0 - self.rate) ** r.size
                            + self.rate * (keep @ r))


@dataclass(frozen=True)
class EpsilonEstimate:
    value: float
    n_samples: int
    r_avg: float
    lam: float  # (1 - gamma) / r_avg

    def __post_init__(self):
        if self.value < 0.0:
            raise ValueError("residual estimate cannot be negative")


def estimate_epsilon(buffer: ReplayBuffer, n_eps: int, q_net, v_target, gamma: float,
                     rng: np.random.Generator,
                     reward_avg: RunningRewardAverage) -> EpsilonEstimate:
    """Mean squared one-step residual over n_eps uniform draws from the buffer.

    Also feeds the drawn rewards into the running reward average, which is
    where the adaptive (1 - gamma) / r_avg scale comes from.
    """
    if n_eps < 1:
        raise ValueError("need at least one sample")
    if len(buffer) < n_eps:
        raise ValueError(f"buffer holds {len(buffer)} < {n_eps} transitions")
    batch = buffer.gather(buffer.sample_indices(rng, n_eps))
    target = batch.rewards + gamma * (1.0 - batch.dones) * v_target.value_batch(batch.next_states)
    resid = target - q_net.value_batch(batch.states, batch.actions)
    reward_avg.update_batch(batch.rewards)
    r_avg = reward_avg.value
    return EpsilonEstimate(float(np.mean(resid * resid)), n_eps, r_avg,
                           (1.0 - gamma) / r_avg)


def _reparam_log_prob(noise: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    """log-density of the reparametrised draw under its own Gaussian."""
    d = noise.shape[1]
    return -0.5 * (noise * noise).sum(axis=1) - log_std.sum(axis=1) - 0.5 * d * LOG_2PI


def j_v_loss(v_net: ValueMlp, q_net, policy: GaussianPolicy, states: np.ndarray,
             noise: np.ndarray, entropy_weight: float = 0.0):
    """Half squared gap between V(s) and a one-sample critic target.

    The target is Q(s, a~) with a~ one fresh reparametrised action per state
    (minus entropy_weight * log pi(a~|s) in the soft mode); only V carries
    gradient.  Returns (loss, grad wrt the value parameters).
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if states.shape[0] == 0:
        raise ValueError("empty batch")
    mean, log_std, _ = policy.mean_log_std(states)
    actions = mean + np.exp(log_std) * noise
    target = q_net.value_batch(states, actions)
    if entropy_weight != 0.0:
        target = target - entropy_weight * _reparam_log_prob(noise, log_std)
    values, cache = v_net.net.forward_cached(states)
    diff = values[:, 0] - target
    loss = float(np.mean(0.5 * diff * diff))
    grad, _ = v_net.net.backward(cache, (diff / diff.size).reshape(-1, 1))
    return loss, grad


def j_q_loss(q_net, batch: Batch, v_target: ValueMlp, gamma: float):
    """Half squared one-step residual toward r + gamma V_target(s').

    The bootstrap is zeroed on terminal transitions and the target is frozen;
    only Q carries gradient.  Returns (loss, grad wrt the critic parameters).
    """
    if batch.states.shape[0] == 0:
        raise ValueError("empty batch")
    target = batch.rewards + gamma * (1.0 - batch.dones) * v_target.value_batch(batch.next_states)
    x = q_net._stack(batch.states, batch.actions)
    values, cache = q_net.net.forward_cached(x)
    diff = values[:, 0] - target
    loss = float(np.mean(0.5 * diff * diff))
    grad, _ = q_net.net.backward(cache, (diff / diff.size).reshape(-1, 1))
    return loss, grad


def _policy_loss(policy: GaussianPolicy, q_net, v_target: ValueMlp, states: np.ndarray,
                 noise: np.ndarray, coeff: float):
    """mean_b [ log pi(a_b|s_b) * (coeff - (Q(s_b, a_b) - V_target(s_b))) ]
    with a_b reparametrised; gradient flows through both the action path and
    the log-density while the critic and baseline parameters stay frozen.
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    b = states.shape[0]
    mean, cache_mean = policy.mean_net.forward_cached(states)
    raw, cache_std = policy.log_std_net.forward_cached(states)
    log_std = np.clip(raw, -8.0, 2.0)
    active = (raw > -8.0) & (raw < 2.0)
    sigma = np.exp(log_std)
    actions = mean + sigma * noise

    logp = _reparam_log_prob(noise, log_std)
    adv = q_net.value_batch(states, actions) - v_target.value_batch(states)
    g = coeff - adv
    loss = float(np.mean(logp * g))

    dq_da = q_net.action_grad_batch(states, actions)
    d_action = (logp[:, None] * (-dq_da)) / b
    d_mean = d_action
    d_log_std = (-(g[:, None]) / b + d_action * sigma * noise) * active

    grad_mean, _ = policy.mean_net.backward(cache_mean, d_mean)
    grad_std, _ = policy.log_std_net.backward(cache_std, d_log_std)
    return loss, grad_mean + grad_std


def j_pi_virel_loss(policy: GaussianPolicy, q_net, v_target: ValueMlp,
                    states: np.ndarray, noise: np.ndarray, alpha: float):
    """Policy loss with a constant entropy coefficient."""
    return _policy_loss(policy, q_net, v_target, states, noise, alpha)


def j_pi_beta_loss(policy: GaussianPolicy, q_net, v_target: ValueMlp,
                   states: np.ndarray, noise: np.ndarray, eps_hat: float, lam: float):
    """Policy loss whose entropy coefficient is the scaled residual estimate."""
    if eps_hat < 0.0:
        raise ValueError("residual estimate cannot be negative")
    if not np.isfinite(lam) or lam < 0.0:
        raise ValueError("lambda must be finite and nonnegative")
    return _policy_loss(policy, q_net, v_target, states, noise, lam * eps_hat)


def polyak_update(target_values: np.ndarray, online_values: np.ndarray,
                  tau: float) -> np.ndarray:
    """Elementwise tau * online + (1 - tau) * target."""
    target_values = np.asarray(target_values, dtype=np.float64)
    online_values = np.asarray(online_values, dtype=np.float64)
    if target_values.shape != online_values.shape:
        raise ValueError("parameter layout mismatch")
    if not (0.0 < tau <= 1.0):
        raise ValueError("tau must lie in (0, 1]")
    return tau * online_values + (1.0 - tau) * target_values


def e_step_gradient(logits: np.ndarray, d: np.ndarray, q_table: np.ndarray,
                    eps: float, floor: float = EPS_FLOOR) -> np.ndarray:
    """Exact actor-update direction on a tabular softmax policy.

    Returns the gradient of eps * (bound) in the logits:
    E_d[ E_pi[Q grad log pi] + eps grad H(pi) ].  At or below the temperature
    floor the entropy term is dropped and the update is the plain policy
    gradient.
    """
    logits = np.asarray(logits, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    q_table = np.asarray(q_table, dtype=np.float64)
    z = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(z)
    pi = expz / expz.sum(axis=1, keepdims=True)

    avg_q = (pi * q_table).sum(axis=1, keepdims=True)
    score = pi * (q_table - avg_q)
    if eps <= floor:
        return d[:, None] * score
    entropy = -xlogy(pi, pi).sum(axis=1, keepdims=True)
    log_pi = np.log(np.maximum(pi, 1e-300))
    grad_entropy = -pi * (log_pi + entropy)
    return d[:, None] * (score + eps * grad_entropy)


def m_step_gradient(q, d: np.ndarray, pi_table: np.ndarray, eps: float,
                    grad_eps: np.ndarray) -> np.ndarray:
    """Exact critic-update direction (ascent on the scaled bound):
    eps * E_{d,pi}[grad Q] - E_{d,pi}[Q] * grad eps.
    """
    d = np.asarray(d, dtype=np.float64)
    pi_table = np.asarray(pi_table, dtype=np.float64)
    weights = d[:, None] * pi_table
    expected_grad = np.zeros_like(np.asarray(grad_eps, dtype=np.float64))
    expected_q = 0.0
    for s in range(weights.shape[0]):
        for a in range(weights.shape[1]):
            w = weights[s, a]
            if w == 0.0:
                continue
            expected_grad += w * q.grad((s, a))
            expected_q += w * q.value((s, a))
    return eps * expected_grad - expected_q * np.asarray(grad_eps, dtype=np.float64)


class TrainingDiverged(RuntimeError):
    """A loss went non-finite; carries a diagnostic snapshot."""

    def __init__(self, step: int, snapshot: dict):
        super().__init__(f"non-finite loss at step {step}: {snapshot}")
        self.step = step
        self.snapshot = snapshot


@dataclass
class TrainResult:
    variant: str
    seed: int
    config: TrainConfig
    rows: list = field(default_factory=list)
    policy: GaussianPolicy | None = None
    q_net: MlpQ | None = None
    v_net: ValueMlp | None = None
    v_target: ValueMlp | None = None

    def column(self, name: str) -> np.ndarray:
        return np.array([row[name] for row in self.rows])


TRACE_FIELDS = ("step", "mean_return", "eps_hat", "entropy", "loss_v", "loss_q", "loss_pi")


def evaluate_policy(env: ContinuousEnv, policy: GaussianPolicy, rng: np.random.Generator,
                    episodes: int, max_path_length: int) -> float:
    """Mean undiscounted raw-reward return using the policy mean action."""
    limit = min(env.horizon, max_path_length)
    total = 0.0
    for _ in range(episodes):
        state = env.reset(rng)
        for _ in range(limit):
            mean, _, _ = policy.mean_log_std(state)
            state, reward = env.step(state, mean[0], rng)
            total += reward
    return total / episodes


def random_policy_return(env: ContinuousEnv, seed: int, episodes: int = 20,
                         max_path_length: int = 999) -> float:
    """Baseline return of uniform actions over the box."""
    rng = np.random.default_rng([seed, 424242])
    limit = min(env.horizon, max_path_length)
    total = 0.0
    for _ in range(episodes):
        state = env.reset(rng)
        for _ in range(limit):
            action = rng.uniform(env.action_low, env.action_high)
            state, reward = env.step(state, action, rng)
            total += reward
    return total / episodes


def train(env: ContinuousEnv, config: TrainConfig, variant: str, seed: int) -> TrainResult:
    """Interleave environment steps with one gradient cycle per step.

    Cycle order per the alternating scheme: value update, critic update,
    policy update, then the Polyak step on the value target.  The "beta"
    variant refreshes its residual estimate at the top of each cycle.
    Everything is deterministic given the seed; independent generator streams
    cover the environment, exploration noise, batch sampling, loss-resampling
    noise and residual estimation so variants with identical coefficients
    consume identical main streams.
    """
    if variant not in ("virel", "beta", "soft"):
        raise ValueError(f"unknown variant {variant!r}")

    streams = [np.random.Generator(np.random.PCG64(s))
               for s in np.random.SeedSequence(seed).spawn(5)]
    rng_env, rng_act, rng_batch, rng_noise, rng_eps = streams

    rng_init = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 101])))
    policy = GaussianPolicy(env.state_dim, env.action_dim, config.net_width, rng_init,
                            log_std_bias=config.log_std_init)
    q_net = MlpQ(env.state_dim, env.action_dim, config.net_width, rng_init)
    v_net = ValueMlp(env.state_dim, config.net_width, rng_init)
    v_target = ValueMlp(env.state_dim, config.net_width, rng_init)
    v_target.params.values[...] = v_net.params.values

    adam_v = Adam(v_net.params.size, config.lr_v)
    adam_q = Adam(q_net.params.size, config.lr_q)
    adam_pi = Adam(policy.params.size, config.lr_pi)

    buffer = ReplayBuffer(config.buffer_capacity, env.state_dim, env.action_dim)
    reward_avg = RunningRewardAverage()
    result = TrainResult(variant, seed, config)
    limit = min(env.horizon, config.max_path_length)

    state = env.reset(rng_env)
    path_len = 0
    eps_hat = 0.0
    losses = {"loss_v": 0.0, "loss_q": 0.0, "loss_pi": 0.0}
    last_states = None
    eval_idx = 0

    for step in range(1, config.total_steps + 1):
        action = policy.sample(state, rng_act.standard_normal(env.action_dim))
        clipped = env.clip_action(action)
        next_state, reward = env.step(state, clipped, rng_env)
        buffer.add(Transition(state, clipped,
                              reward * config.reward_scale + config.reward_offset,
                              next_state, False))
        path_len += 1
        if path_len >= limit:
            state = env.reset(rng_env)
            path_len = 0
        else:
            state = next_state

        if len(buffer) >= config.batch_size:
            batch = buffer.gather(buffer.sample_indices(rng_batch, config.batch_size))
            last_states = batch.states
            noise = rng_noise.standard_normal((config.batch_size, env.action_dim))

            if variant == "beta":
                est = estimate_epsilon(
                    buffer, min(config.n_eps_samples, len(buffer)), q_net, v_target,
                    config.gamma, rng_eps, reward_avg)
                eps_hat = est.value
                lam = config.lambda_beta if config.lambda_beta is not None else est.lam

            entropy_weight = config.alpha if variant == "soft" else 0.0
            loss_v, grad_v = j_v_loss(v_net, q_net, policy, batch.states, noise,
                                      entropy_weight)
            adam_v.step(v_net.params, grad_v)

            loss_q, grad_q = j_q_loss(q_net, batch, v_target, config.gamma)
            adam_q.step(q_net.params, grad_q)

            if variant == "beta":
                loss_pi, grad_pi = j_pi_beta_loss(policy, q_net, v_target, batch.states,
                                                  noise, eps_hat, lam)
            else:
                loss_pi, grad_pi = j_pi_virel_loss(policy, q_net, v_target, batch.states,
                                                   noise, config.alpha)
            adam_pi.step(policy.params, grad_pi)

            v_target.params.values[...] = polyak_update(
                v_target.params.values, v_net.params.values, config.tau)

            losses = {"loss_v": loss_v, "loss_q": loss_q, "loss_pi": loss_pi}
            if not all(np.isfinite(v) for v in losses.values()):
                raise TrainingDiverged(step, {
                    **losses,
                    "eps_hat": eps_hat,
                    "policy_norm": float(np.linalg.norm(policy.params.values)),
                    "q_norm": float(np.linalg.norm(q_net.params.values)),
                })

        if step % config.steps_per_eval == 0:
            eval_idx += 1
            eval_rng = np.random.default_rng([seed, 7777, eval_idx])
            mean_return = evaluate_policy(env, policy, eval_rng, config.eval_episodes,
                                          config.max_path_length)
            if variant != "beta" and len(buffer) >= 1:
                est = estimate_epsilon(buffer, min(config.n_eps_samples, len(buffer)),
                                       q_net, v_target, config.gamma, rng_eps, reward_avg)
                eps_hat = est.value
            ent_states = last_states if last_states is not None else np.atleast_2d(state)
            entropy = float(np.mean(policy.entropy_batch(ent_states)))
            result.rows.append({
                "step": step,
                "mean_return": mean_return,
                "eps_hat": eps_hat,
                "entropy": entropy,
                **losses,
            })

    result.policy, result.q_net, result.v_net, result.v_target = policy, q_net, v_net, v_target
    return result


def config_to_dict(config: TrainConfig) -> dict:
    return asdict(config)
