"""Function approximators with hand-written reverse-mode gradients.

Everything is float64 numpy.  Each approximator owns a single flat
:class:`ParamVector`; named tensors are memory-sharing views into it, so
optimisers, Polyak averaging and checkpointing all operate on one array.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable

import numpy as np

LOG_STD_MIN = -8.0
LOG_STD_MAX = 2.0
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class ParamLayout:
    names: tuple
    shapes: dict
    offsets: dict
    size: int


class ParamVector:
    """Flat parameter vector plus a layout mapping names to slices."""

    __slots__ = ("values", "layout")

    def __init__(self, values: np.ndarray, layout: ParamLayout):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 1 or values.size != layout.size:
            raise ValueError(f"expected a flat vector of length {layout.size}")
        if not np.all(np.isfinite(values)):
            raise ValueError("parameter values must be finite")
        self.values = values
        self.layout = layout

    @staticmethod
    def build(named_shapes, values: np.ndarray | None = None) -> "ParamVector":
        names, shapes, offsets = [], {}, {}
        offset = 0
        for name, shape in named_shapes:
            names.append(name)
            shapes[name] = tuple(shape)
            offsets[name] = offset
            offset += int(np.prod(shape))
        layout = ParamLayout(tuple(names), shapes, offsets, offset)
        if values is None:
            values = np.zeros(offset)
        return ParamVector(values, layout)

    def view(self, name: str) -> np.ndarray:
        shape = self.layout.shapes[name]
        start = self.layout.offsets[name]
        return self.values[start : start + int(np.prod(shape))].reshape(shape)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    @property
    def size(self) -> int:
        return self.layout.size


def save_params(path, pv: ParamVector) -> None:
    """Checkpoint: one JSON header line, then the raw float64 block."""
    header = {
        "names": list(pv.layout.names),
        "shapes": {k: list(v) for k, v in pv.layout.shapes.items()},
        "offsets": dict(pv.layout.offsets),
        "size": pv.layout.size,
        "dtype": "float64",
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("ascii"))
        fh.write(b"\n")
        fh.write(pv.values.tobytes())


def load_params(path) -> ParamVector:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("ascii"))
        raw = fh.read()
    values = np.frombuffer(raw, dtype=np.float64).copy()
    layout = ParamLayout(
        tuple(header["names"]),
        {k: tuple(v) for k, v in header["shapes"].items()},
        {k: int(v) for k, v in header["offsets"].items()},
        int(header["size"]),
    )
    return ParamVector(values, layout)


class Mlp:
    """Two hidden tanh layers and a linear head, with explicit backward.

    Weights are initialised uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).  The
    net can either own its parameters or live inside a larger ParamVector
    under a name prefix (used by the Gaussian policy so one flat vector
    covers both heads).
    """

    def __init__(self, in_dim: int, out_dim: int, width: int,
                 rng: np.random.Generator | None = None,
                 params: ParamVector | None = None, prefix: str = ""):
        if width < 1:
            raise ValueError("width must be positive")
        self.in_dim, self.out_dim, self.width = in_dim, out_dim, width
        self.prefix = prefix
        if params is None:
            params = ParamVector.build(self.layer_shapes(in_dim, out_dim, width, prefix))
        self.params = params
        if rng is not None:
            self._init_weights(rng)

    @staticmethod
    def layer_shapes(in_dim, out_dim, width, prefix=""):
        return [
            (prefix + "W0", (in_dim, width)),
            (prefix + "b0", (width,)),
            (prefix + "W1", (width, width)),
            (prefix + "b1", (width,)),
            (prefix + "W2", (width, out_dim)),
            (prefix + "b2", (out_dim,)),
        ]

    def _init_weights(self, rng: np.random.Generator) -> None:
        for w_name, fan_in in (("W0", self.in_dim), ("W1", self.width), ("W2", self.width)):
            bound = 1.0 / np.sqrt(fan_in)
            w = self.params.view(self.prefix + w_name)
            w[...] = rng.uniform(-bound, bound, size=w.shape)
            b = self.params.view(self.prefix + "b" + w_name[1])
            b[...] = rng.uniform(-bound, bound, size=b.shape)

    def _tensors(self):
        v = self.params.view
        p = self.prefix
        return v(p + "W0"), v(p + "b0"), v(p + "W1"), v(p + "b1"), v(p + "W2"), v(p + "b2")

    def forward(self, x: np.ndarray) -> np.ndarray:
        """x: [B, in_dim] -> [B, out_dim]."""
        w0, b0, w1, b1, w2, b2 = self._tensors()
        h1 = np.tanh(x @ w0 + b0)
        h2 = np.tanh(h1 @ w1 + b1)
        return h2 @ w2 + b2

    def forward_cached(self, x: np.ndarray):
        w0, b0, w1, b1, w2, b2 = self._tensors()
        h1 = np.tanh(x @ w0 + b0)
        h2 = np.tanh(h1 @ w1 + b1)
        y = h2 @ w2 + b2
        return y, (x, h1, h2)

    def backward(self, cache, grad_out: np.ndarray):
        """Accumulate dL/dparams (flat) and dL/dx from dL/dy.

        cache comes from :meth:`forward_cached`; grad_out is [B, out_dim].
        """
        x, h1, h2 = cache
        w0, b0, w1, b1, w2, b2 = self._tensors()
        # Gradients share the owning vector's layout so nets embedded in a
        # larger ParamVector produce full-length (zero-padded) gradients.
        grad = ParamVector(np.zeros(self.params.size), self.params.layout)

        g = grad.view
        p = self.prefix
        g(p + "W2")[...] = h2.T @ grad_out
        g(p + "b2")[...] = grad_out.sum(axis=0)
        dh2 = (grad_out @ w2.T) * (1.0 - h2 * h2)
        g(p + "W1")[...] = h1.T @ dh2
        g(p + "b1")[...] = dh2.sum(axis=0)
        dh1 = (dh2 @ w1.T) * (1.0 - h1 * h1)
        g(p + "W0")[...] = x.T @ dh1
        g(p + "b0")[...] = dh1.sum(axis=0)
        dx = dh1 @ w0.T
        return grad.values, dx


def _one_hot(index: int, size: int) -> np.ndarray:
    v = np.zeros(size)
    v[index] = 1.0
    return v


class TabularQ:
    """Q table; the parameters are the entries themselves."""

    kind = "tabular"

    def __init__(self, n_states: int, n_actions: int, table: np.ndarray | None = None):
        self.n_states, self.n_actions = n_states, n_actions
        values = None if table is None else np.asarray(table, dtype=np.float64).ravel().copy()
        self.params = ParamVector.build([("table", (n_states, n_actions))], values)

    @property
    def table(self) -> np.ndarray:
        return self.params.view("table")

    def value(self, h) -> float:
        s, a = h
        return float(self.table[s, a])

    def grad(self, h) -> np.ndarray:
        s, a = h
        if not (0 <= s < self.n_states and 0 <= a < self.n_actions):
            raise IndexError(f"state-action ({s}, {a}) out of range")
        return _one_hot(s * self.n_actions + a, self.params.size)


class LinearQ:
    """Linear-in-features Q; the gradient is the feature vector."""

    kind = "linear"

    def __init__(self, features: Callable, n_features: int, weights: np.ndarray | None = None):
        self.features = features
        self.params = ParamVector.build([("w", (n_features,))], weights)

    @property
    def weights(self) -> np.ndarray:
        return self.params.view("w")

    def value(self, h) -> float:
        phi = np.asarray(self.features(h), dtype=np.float64)
        if phi.shape != self.weights.shape:
            raise ValueError("feature dimension mismatch")
        return float(self.weights @ phi)

    def grad(self, h) -> np.ndarray:
        phi = np.asarray(self.features(h), dtype=np.float64)
        if phi.shape != self.weights.shape:
            raise ValueError("feature dimension mismatch")
        return phi.copy()


def one_hot_features(n_states: int, n_actions: int) -> Callable:
    """Indicator features that make a LinearQ behave exactly like a table."""

    def features(h):
        s, a = h
        return _one_hot(s * n_actions + a, n_states * n_actions)

    return features


class MlpQ:
    """Q network over concatenated (state, action) vectors."""

    kind = "mlp"

    def __init__(self, state_dim: int, action_dim: int, width: int, rng: np.random.Generator):
        self.state_dim, self.action_dim = state_dim, action_dim
        self.net = Mlp(state_dim + action_dim, 1, width, rng=rng)
        self.params = self.net.params

    def _stack(self, states, actions):
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        if states.shape[1] != self.state_dim or actions.shape[1] != self.action_dim:
            raise ValueError("input dimension mismatch")
        return np.concatenate([states, actions], axis=1)

    def value(self, h) -> float:
        s, a = h
        x = self._stack(s, a)
        return float(self.net.forward(x)[0, 0])

    def grad(self, h) -> np.ndarray:
        s, a = h
        x = self._stack(s, a)
        _, cache = self.net.forward_cached(x)
        flat, _ = self.net.backward(cache, np.ones((1, 1)))
        return flat

    def value_batch(self, states, actions) -> np.ndarray:
        return self.net.forward(self._stack(states, actions))[:, 0]

    def param_grad_weighted(self, states, actions, weights) -> np.ndarray:
        """Gradient of sum_b weights[b] * Q(s_b, a_b) with respect to params."""
        x = self._stack(states, actions)
        _, cache = self.net.forward_cached(x)
        flat, _ = self.net.backward(cache, np.asarray(weights, dtype=np.float64).reshape(-1, 1))
        return flat

    def action_grad_batch(self, states, actions) -> np.ndarray:
        """dQ/da per row, holding parameters fixed."""
        x = self._stack(states, actions)
        _, cache = self.net.forward_cached(x)
        _, dx = self.net.backward(cache, np.ones((x.shape[0], 1)))
        return dx[:, self.state_dim :]


class OneHotMlpQ(MlpQ):
    """MLP Q over a discrete state-action grid via one-hot encoding."""

    kind = "mlp"

    def __init__(self, n_states: int, n_actions: int, width: int, rng: np.random.Generator):
        self.n_states, self.n_actions = n_states, n_actions
        super().__init__(n_states, n_actions, width, rng)

    def _encode(self, h):
        s, a = h
        return _one_hot(s, self.n_states), _one_hot(a, self.n_actions)

    def value(self, h) -> float:
        return super().value(self._encode(h))

    def grad(self, h) -> np.ndarray:
        return super().grad(self._encode(h))


class FunctionQ:
    """Fixed analytic Q, no parameters; handy as a frozen ground-truth critic."""

    kind = "function"

    def __init__(self, value_fn: Callable, action_grad_fn: Callable | None = None):
        self._value_fn = value_fn
        self._action_grad_fn = action_grad_fn

    def value(self, h) -> float:
        s, a = h
        return float(self._value_fn(s, a))

    def value_batch(self, states, actions) -> np.ndarray:
        states = np.atleast_2d(states)
        actions = np.atleast_2d(actions)
        return np.array([self._value_fn(s, a) for s, a in zip(states, actions)])

    def action_grad_batch(self, states, actions) -> np.ndarray:
        if self._action_grad_fn is None:
            raise NotImplementedError("no action gradient supplied")
        states = np.atleast_2d(states)
        actions = np.atleast_2d(actions)
        return np.array([self._action_grad_fn(s, a) for s, a in zip(states, actions)])


class ValueMlp:
    """State-only value network."""

    def __init__(self, state_dim: int, width: int, rng: np.random.Generator):
        self.state_dim = state_dim
        self.net = Mlp(state_dim, 1, width, rng=rng)
        self.params = self.net.params

    def value_batch(self, states) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        return self.net.forward(states)[:, 0]

    def param_grad_weighted(self, states, weights) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        _, cache = self.net.forward_cached(states)
        flat, _ = self.net.backward(cache, np.asarray(weights, dtype=np.float64).reshape(-1, 1))
        return flat


class GaussianPolicy:
    """Diagonal Gaussian over actions with separate mean and log-std nets.

    log-std outputs are clamped to [-8, 2], which keeps the entropy finite in
    both directions.  Sampling uses the reparametrised form
    a = mean + exp(log_std) * noise.
    """

    def __init__(self, state_dim: int, action_dim: int, width: int, rng: np.random.Generator,
                 log_std_bias: float = 0.0):
        self.state_dim, self.action_dim = state_dim, action_dim
        shapes = Mlp.layer_shapes(state_dim, action_dim, width, "mean.") + \
            Mlp.layer_shapes(state_dim, action_dim, width, "std.")
        self.params = ParamVector.build(shapes)
        self.mean_net = Mlp(state_dim, action_dim, width, params=self.params, prefix="mean.")
        self.log_std_net = Mlp(state_dim, action_dim, width, params=self.params, prefix="std.")
        self.mean_net._init_weights(rng)
        self.log_std_net._init_weights(rng)
        self.params.view("std.b2")[...] += log_std_bias

    def mean_log_std(self, states):
        """Returns (mean, clamped log-std, mask of rows/cols still in range)."""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        mean = self.mean_net.forward(states)
        raw = self.log_std_net.forward(states)
        log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
        active = (raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)
        return mean, log_std, active

    def sample(self, state, noise) -> np.ndarray:
        """Single-state reparametrised draw; noise is a standard-normal vector."""
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != (self.action_dim,):
            raise ValueError("noise dimension must match the action dimension")
        mean, log_std, _ = self.mean_log_std(state)
        return mean[0] + np.exp(log_std[0]) * noise

    def sample_batch(self, states, noise) -> np.ndarray:
        mean, log_std, _ = self.mean_log_std(states)
        return mean + np.exp(log_std) * noise

    def log_prob(self, state, action) -> float:
        mean, log_std, _ = self.mean_log_std(state)
        z = (np.asarray(action, dtype=np.float64) - mean[0]) / np.exp(log_std[0])
        return float(-0.5 * np.sum(z * z) - np.sum(log_std[0]) - 0.5 * self.action_dim * LOG_2PI)

    def entropy(self, state) -> float:
        _, log_std, _ = self.mean_log_std(state)
        return float(np.sum(log_std[0]) + 0.5 * self.action_dim * (1.0 + LOG_2PI))

    def entropy_batch(self, states) -> np.ndarray:
        _, log_std, _ = self.mean_log_std(states)
        return log_std.sum(axis=1) + 0.5 * self.action_dim * (1.0 + LOG_2PI)


# Spec-level operation aliases; the classes above carry the implementations.

def q_eval(q, h) -> float:
    return q.value(h)


def q_grad(q, h) -> np.ndarray:
    return q.grad(h)


def policy_sample(pi: GaussianPolicy, state, noise) -> np.ndarray:
    return pi.sample(state, noise)


def policy_log_prob(pi: GaussianPolicy, state, action) -> float:
    return pi.log_prob(state, action)


def policy_entropy(pi: GaussianPolicy, state) -> float:
    return pi.entropy(state)


def apply_grad(params: ParamVector, grad: np.ndarray, lr: float) -> ParamVector:
    """Plain gradient step, returned as a fresh vector."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.values.shape:
        raise ValueError("gradient layout mismatch")
    return ParamVector(params.values - lr * grad, params.layout)


class Adam:
    """Standard Adam with bias correction; steps mutate the vector in place."""

    def __init__(self, size: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: ParamVector, grad: np.ndarray) -> None:
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != params.values.shape:
            raise ValueError("gradient layout mismatch")
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        params.values -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
