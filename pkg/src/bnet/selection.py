"""Robust elitist selection under noisy fitness.

The champion's fitness is the running mean of all its evaluation episodes. A
challenger (single evaluation above that mean) is re-evaluated until its
sample count matches ``max(champion_samples, r)`` and is promoted only when
its recorded mean is strictly greater.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass
class FitnessRecord:
    candidate_id: int
    samples: list[float] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.samples)

    @property
    def mean(self) -> float:
        if not self.samples:
            raise ValueError(f"candidate {self.candidate_id} has no fitness samples")
        return float(np.mean(self.samples))

    def add(self, fitness: float) -> None:
        self.samples.append(float(fitness))


@dataclass
class SelectionConfig:
    r: int = 3  # desired repeat count

    def __post_init__(self):
        if self.r < 1:
            raise ValueError("repeat count must be >= 1")


def find_challengers(records: list[FitnessRecord], champion: FitnessRecord) -> list[FitnessRecord]:
    """Candidates whose single-evaluation fitness strictly beats the champion
    mean, best first."""
    mean = champion.mean
    out = [r for r in records if r is not champion and r.samples and r.samples[0] > mean]
    out.sort(key=lambda r: -r.samples[0])
    return out


def duel(champion: FitnessRecord, challenger: FitnessRecord, cfg: SelectionConfig,
         evaluator: Callable[[FitnessRecord], float]) -> tuple[FitnessRecord, bool]:
    """Re-evaluate and compare; returns (surviving champion, promoted flag).

    ``evaluator`` runs one deterministic evaluation episode for the record's
    candidate and returns its fitness; every sample it produces is appended to
    exactly one record.
    """
    while champion.n < cfg.r:
        champion.add(evaluator(champion))
    target = max(champion.n, cfg.r)
    while challenger.n < target:
        challenger.add(evaluator(challenger))
    promoted = challenger.mean > champion.mean
    return (challenger, True) if promoted else (champion, False)
