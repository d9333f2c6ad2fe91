"""State-value network trained on Monte-Carlo returns.

A small fully-connected net (input -> 128 -> 64 -> 1, tanh hidden layers,
linear output) fitted by minibatch gradient descent with Adam. Advantages are
the difference between a trajectory's stored returns and the value estimate
at each state.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .experience import ExperiencePool, Trajectory

HIDDEN_SIZES = (128, 64)


@dataclass
class CriticTrainConfig:
    steps: int = 1000
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")


class ValueNet:
    """Feed-forward value regressor with its own Adam moment buffers."""

    def __init__(self, input_dim: int, rng: np.random.Generator, hidden=HIDDEN_SIZES):
        self.input_dim = input_dim
        sizes = (input_dim, *hidden, 1)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(sizes, sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        self._adam_m = [np.zeros_like(p) for p in self._params()]
        self._adam_v = [np.zeros_like(p) for p in self._params()]
        self._adam_t = 0

    def _params(self):
        return [*self.weights, *self.biases]

    def param_vector(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self._params()])

    def set_param_vector(self, vec: np.ndarray) -> None:
        off = 0
        for p in self._params():
            p.flat[:] = vec[off: off + p.size]
            off += p.size

    def values(self, states: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=np.float64)
        if states.ndim != 2 or states.shape[1] != self.input_dim:
            raise ValueError(f"expected states of shape (batch, {self.input_dim}), got {states.shape}")
        h = states
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.tanh(h @ w + b)
        return (h @ self.weights[-1] + self.biases[-1])[:, 0]

    def loss_and_grads(self, states: np.ndarray, targets: np.ndarray):
        """Mean squared error and its gradient w.r.t. every parameter."""
        acts = [np.asarray(states, dtype=np.float64)]
        h = acts[0]
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.tanh(h @ w + b)
            acts.append(h)
        pred = (h @ self.weights[-1] + self.biases[-1])[:, 0]
        err = pred - targets
        n = len(targets)
        loss = float(np.mean(err**2))

        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.biases)
        delta = (2.0 / n) * err[:, None]  # d loss / d output
        grads_w[-1] = acts[-1].T @ delta
        grads_b[-1] = delta.sum(axis=0)
        back = delta @ self.weights[-1].T
        for layer in range(len(self.weights) - 2, -1, -1):
            back = back * (1.0 - acts[layer + 1] ** 2)  # tanh'
            grads_w[layer] = acts[layer].T @ back
            grads_b[layer] = back.sum(axis=0)
            if layer > 0:
                back = back @ self.weights[layer].T
        return loss, [*grads_w, *grads_b]

    def adam_step(self, grads, cfg: CriticTrainConfig) -> None:
        self._adam_t += 1
        t = self._adam_t
        for p, g, m, v in zip(self._params(), grads, self._adam_m, self._adam_v):
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1 - cfg.beta2) * g**2
            m_hat = m / (1 - cfg.beta1**t)
            v_hat = v / (1 - cfg.beta2**t)
            p -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)


def value(net: ValueNet, state: np.ndarray) -> float:
    state = np.asarray(state, dtype=np.float64)
    if state.ndim != 1 or state.shape[0] != net.input_dim:
        raise ValueError(f"expected state of length {net.input_dim}, got shape {state.shape}")
    return float(net.values(state[None, :])[0])


def fit(net: ValueNet, pool: ExperiencePool, cfg: CriticTrainConfig,
        rng: np.random.Generator) -> float:
    """Run ``cfg.steps`` minibatch Adam updates on the pool; returns the final
    full-pool MSE. Minibatch draws come from ``rng``, so runs are repeatable."""
    if len(pool) == 0:
        raise ValueError("cannot fit critic on an empty experience pool")
    states, _, returns = pool.arrays()
    n = len(returns)
    for _ in range(cfg.steps):
        idx = rng.integers(0, n, size=min(cfg.batch_size, n))
        _, grads = net.loss_and_grads(states[idx], returns[idx])
        net.adam_step(grads, cfg)
    final = float(np.mean((net.values(states) - returns) ** 2))
    if not np.isfinite(final):
        raise FloatingPointError(f"critic training diverged (MSE={final})")
    return final


def advantage(net: ValueNet, trajectory: Trajectory) -> np.ndarray:
    """Per-step Monte-Carlo advantage: stored return minus value estimate."""
    if trajectory.returns is None:
        raise ValueError("trajectory returns must be computed before advantages")
    return trajectory.returns - net.values(trajectory.states())


def step_weights(trajectory: Trajectory, source: str, net: ValueNet | None = None) -> np.ndarray:
    """Behavior-loss step weights: critic advantages, or the direct immediate
    rewards for tasks whose reward already carries the action value."""
    if source == "critic":
        if net is None:
            raise ValueError("critic weighting requires a value net")
        return advantage(net, trajectory)
    if source == "reward":
        return trajectory.rewards()
    raise ValueError(f"unknown weighting source {source!r}; expected 'critic' or 'reward'")
