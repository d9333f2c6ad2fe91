"""Episode storage: trajectories, returns, the elite archive and the
global experience pool feeding the critic."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .behavior import BehaviorSample


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: int
    reward: float
    action_probabilities: np.ndarray  # as emitted by the acting policy


@dataclass
class Trajectory:
    transitions: list[Transition]
    final_state: np.ndarray | None = None
    source_id: int | None = None
    mode: str = "deterministic"
    returns: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.transitions)

    @property
    def fitness(self) -> float:
        """Cumulative undiscounted reward."""
        return float(sum(t.reward for t in self.transitions))

    def states(self) -> np.ndarray:
        return np.stack([t.state for t in self.transitions])

    def actions(self) -> np.ndarray:
        return np.asarray([t.action for t in self.transitions], dtype=np.int64)

    def rewards(self) -> np.ndarray:
        return np.asarray([t.reward for t in self.transitions], dtype=np.float64)

    def probabilities(self) -> np.ndarray:
        return np.stack([t.action_probabilities for t in self.transitions])


def discounted_returns(trajectory: Trajectory, gamma: float) -> np.ndarray:
    """Per-step discounted return, computed backward in a single pass."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"discount {gamma} outside [0, 1]")
    if len(trajectory) == 0:
        raise ValueError("empty trajectory")
    rewards = trajectory.rewards()
    returns = np.empty_like(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        returns[t] = acc
    return returns


def adapted_probabilities(trajectory: Trajectory) -> np.ndarray:
    """Stored distributions adapted to one-hot on the action actually taken."""
    probs = trajectory.probabilities()
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(trajectory)), trajectory.actions()] = 1.0
    return onehot


@dataclass
class ArchiveEntry:
    trajectory: Trajectory
    fitness: float
    iteration_tag: int = -1  # iteration in which the entry entered the archive


class EliteArchive:
    """Bounded set of high-fitness episodes used as imitation references.

    While below capacity every offer is accepted. Once full, an offer
    replaces the current minimum-fitness entry if it is strictly better.
    Replacements per iteration are limited: at most ``replacement_budget``
    entries in the archive may originate from the current iteration, which
    keeps a single candidate from flooding the reference set. Within an
    iteration later, better offers may displace this iteration's earlier ones
    without consuming extra budget, so the budget slots end up holding the
    best offers seen this iteration.
    """

    def __init__(self, capacity: int = 10, replacement_budget: int = 2):
        if capacity < 1 or replacement_budget < 1:
            raise ValueError("capacity and replacement budget must be positive")
        self.capacity = capacity
        self.replacement_budget = replacement_budget
        self.entries: list[ArchiveEntry] = []
        self._iteration = 0

    def __len__(self) -> int:
        return len(self.entries)

    def begin_iteration(self) -> None:
        self._iteration += 1

    def min_fitness(self) -> float:
        if not self.entries:
            raise ValueError("empty archive")
        return self.entries[0].fitness

    def _sort(self) -> None:
        self.entries.sort(key=lambda e: e.fitness)

    def offer(self, trajectory: Trajectory, fitness: float | None = None) -> bool:
        """Offer an episode; returns True if it entered the archive."""
        fitness = trajectory.fitness if fitness is None else float(fitness)
        entry = ArchiveEntry(trajectory, fitness, self._iteration)
        if len(self.entries) < self.capacity:
            self.entries.append(entry)
            self._sort()
            return True
        fresh = [e for e in self.entries if e.iteration_tag == self._iteration]
        if len(fresh) < self.replacement_budget:
            if fitness > self.entries[0].fitness:
                self.entries[0] = entry
                self._sort()
                return True
            return False
        weakest = min(fresh, key=lambda e: e.fitness)
        if fitness > weakest.fitness:
            self.entries[self.entries.index(weakest)] = entry
            self._sort()
            return True
        return False


def reference_set(archive: "EliteArchive") -> list[BehaviorSample]:
    """Reference behaviors for all archive entries.

    Stored per-step distributions are adapted one-hot onto the action that was
    actually taken; archive contents are never modified. Weights default to
    ones — the caller installs advantage or reward weights via
    ``BehaviorSample.with_weights``.
    """
    if not archive.entries:
        raise ValueError("empty archive")
    samples = []
    for entry in archive.entries:
        traj = entry.trajectory
        samples.append(
            BehaviorSample(
                states=traj.states(),
                actions=traj.actions(),
                ref_probs=adapted_probabilities(traj),
                weights=np.ones(len(traj)),
            )
        )
    return samples


class ExperiencePool:
    """FIFO-bounded set of all discovered (state, action, return) triples."""

    def __init__(self, capacity: int = 50_000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: deque = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    def append_trajectory(self, trajectory: Trajectory) -> None:
        if trajectory.returns is None:
            raise ValueError("trajectory returns must be computed before pooling")
        if not np.all(np.isfinite(trajectory.returns)):
            raise ValueError("non-finite return in trajectory")
        for tr, ret in zip(trajectory.transitions, trajectory.returns):
            self._items.append((tr.state, tr.action, float(ret)))

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if not self._items:
            raise ValueError("empty experience pool")
        states = np.stack([s for s, _, _ in self._items])
        actions = np.asarray([a for _, a, _ in self._items], dtype=np.int64)
        returns = np.asarray([r for _, _, r in self._items], dtype=np.float64)
        return states, actions, returns
