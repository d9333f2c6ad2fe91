"""Behavior distances and imitation losses over stored state sets.

A *policy* here is anything callable on a (batch, obs_dim) state matrix that
returns a (batch, n_actions) probability matrix — phenotypes provide
``forward_batch``. Reference behaviors are frozen samples: states, actions,
the reference's per-step distributions adapted one-hot to the taken action,
and per-step weights (advantage estimates, or direct rewards in reward-
weighted mode).
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np

PROB_FLOOR = 1e-12

METRICS = ("behavior_distance", "weighted_behavior_distance", "weighted_cross_entropy")


@dataclass(frozen=True)
class BehaviorSample:
    states: np.ndarray      # (T, obs_dim)
    actions: np.ndarray     # (T,)
    ref_probs: np.ndarray   # (T, n_actions), adapted one-hot
    weights: np.ndarray     # (T,)

    def __post_init__(self):
        T = self.states.shape[0]
        if T < 1:
            raise ValueError("empty behavior sample")
        if not (len(self.actions) == len(self.ref_probs) == len(self.weights) == T):
            raise ValueError("behavior sample sequences differ in length")

    def with_weights(self, weights: np.ndarray) -> "BehaviorSample":
        return replace(self, weights=np.asarray(weights, dtype=np.float64))


def _as_prob_matrix(policy, states: np.ndarray) -> np.ndarray:
    fwd = getattr(policy, "forward_batch", policy)
    return np.asarray(fwd(states), dtype=np.float64)


def behavior_distance(policy_a, policy_b, states: np.ndarray) -> float:
    """Mean per-state L1 distance between two policies' action distributions."""
    states = np.asarray(states)
    if states.shape[0] == 0:
        raise ValueError("empty state set")
    pa = _as_prob_matrix(policy_a, states)
    pb = _as_prob_matrix(policy_b, states)
    return float(np.abs(pa - pb).sum(axis=1).mean())


def positive_advantage(w):
    """Clip weights to their positive part (negative steps contribute zero)."""
    return np.maximum(w, 0.0)


def _l1_rows(probs: np.ndarray, ref_probs: np.ndarray) -> np.ndarray:
    return np.abs(probs - ref_probs).sum(axis=1)


def _weighted_distance_from_probs(probs: np.ndarray, sample: BehaviorSample) -> float:
    w = sample.weights
    norm = np.abs(w).mean()
    d = _l1_rows(probs, sample.ref_probs)
    if norm == 0.0:
        return float(d.mean())  # degenerate weights: fall back to the plain distance
    return float((d * w).mean() / norm)


def _weighted_cross_entropy_from_probs(probs: np.ndarray, sample: BehaviorSample) -> float:
    taken = probs[np.arange(len(sample.actions)), sample.actions]
    h = -np.log(np.maximum(taken, PROB_FLOOR))
    return float((h * positive_advantage(sample.weights)).mean())


_METRIC_FROM_PROBS = {
    "behavior_distance": lambda p, s: float(_l1_rows(p, s.ref_probs).mean()),
    "weighted_behavior_distance": _weighted_distance_from_probs,
    "weighted_cross_entropy": _weighted_cross_entropy_from_probs,
}


def weighted_behavior_distance(policy, sample: BehaviorSample) -> float:
    """Weight-averaged L1 behavior distance to an adapted reference.

    Weights are used as given (they may be negative, in which case matching
    the reference at that step *increases* the loss); the normalizer is the
    mean absolute weight, so uniformly rescaling all weights by a positive
    constant leaves the value unchanged.
    """
    return _weighted_distance_from_probs(_as_prob_matrix(policy, sample.states), sample)


def weighted_cross_entropy(policy, sample: BehaviorSample) -> float:
    """Per-step cross-entropy against the one-hot reference, weighted by the
    positive part of the step weights."""
    return _weighted_cross_entropy_from_probs(_as_prob_matrix(policy, sample.states), sample)


@dataclass(frozen=True)
class LossSpec:
    """A behavior loss: one metric summed over a set of reference behaviors."""

    metric: str
    references: tuple[BehaviorSample, ...]

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}; expected one of {METRICS}")
        if len(self.references) < 1:
            raise ValueError("loss spec needs at least one reference behavior")

    @cached_property
    def _stacked_states(self) -> np.ndarray:
        return np.concatenate([r.states for r in self.references], axis=0)

    @cached_property
    def _offsets(self) -> np.ndarray:
        lengths = [r.states.shape[0] for r in self.references]
        return np.concatenate([[0], np.cumsum(lengths)])


def behavior_loss(policy, spec: LossSpec) -> float:
    """Sum of the chosen metric over all reference behaviors (lower is better).

    The policy is evaluated once on the concatenation of all reference state
    sets, which keeps evolutionary-search loss evaluations to a single batched
    forward pass.
    """
    probs = _as_prob_matrix(policy, spec._stacked_states)
    metric = _METRIC_FROM_PROBS[spec.metric]
    total = 0.0
    off = spec._offsets
    for m, ref in enumerate(spec.references):
        total += metric(probs[off[m]: off[m + 1]], ref)
    return float(total)
