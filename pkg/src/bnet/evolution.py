"""Gradient-free (mu + lambda) evolutionary search over CGP genomes.

Minimizes an arbitrary deterministic loss. Selection is rank-based
truncation over parents and offspring together; ties prefer the older
individual, so the search is strictly elitist. Losses are evaluated once per
individual (they are deterministic by contract).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .cgp import CgpConfig, Genome, mutate, random_genome


@dataclass
class EaConfig:
    mu: int
    lam: int
    iterations: int
    mutation_rate: float
    seeds: tuple[Genome, ...] = ()
    rate_schedule: Callable[["EaState"], float] | None = None

    def __post_init__(self):
        if self.mu < 1 or self.lam < 1 or self.iterations < 1:
            raise ValueError("mu, lambda and iterations must be positive")
        if not 0.0 <= self.mutation_rate <= 1.0:
            raise ValueError("mutation rate outside [0, 1]")


@dataclass
class EaState:
    iteration: int
    rate: float
    best_loss: float
    stagnant_iterations: int


@dataclass
class EaResult:
    genomes: list[Genome]      # final parents, best first
    losses: list[float]
    trace: list[float]         # best loss after each iteration
    evaluations: int

    @property
    def best_genome(self) -> Genome:
        return self.genomes[0]

    @property
    def best_loss(self) -> float:
        return self.losses[0]


def adapt_mutation_rate(state: EaState, schedule=None) -> float:
    """Mutation-rate hook. The default keeps the rate constant; a schedule
    callable may return a new rate, which is clamped to (0, 1]."""
    if schedule is None:
        return state.rate
    return float(min(max(schedule(state), 1e-9), 1.0))


def stagnation_doubling(patience: int, cap: float = 0.5):
    """Schedule that doubles the rate after ``patience`` flat iterations."""
    def schedule(state: EaState) -> float:
        if state.stagnant_iterations > 0 and state.stagnant_iterations % patience == 0:
            return min(state.rate * 2.0, cap)
        return state.rate
    return schedule


def _evaluate(loss, genome: Genome) -> float:
    val = float(loss(genome))
    if not np.isfinite(val):
        warnings.warn("discarding candidate with non-finite loss", RuntimeWarning)
        return np.inf
    return val


def run(cfg: EaConfig, cgp_config: CgpConfig, loss: Callable[[Genome], float],
        rng: np.random.Generator) -> EaResult:
    """Run the search and return the final parents with their losses."""
    population = []  # (loss, birth, genome); list order encodes age
    birth = 0
    evaluations = 0
    for _ in range(cfg.mu):
        g = random_genome(cgp_config, rng)
        population.append((_evaluate(loss, g), birth, g))
        birth += 1
        evaluations += 1
    for g in cfg.seeds:
        population.append((_evaluate(loss, g), birth, g))
        birth += 1
        evaluations += 1
    population.sort(key=lambda t: (t[0], t[1]))
    population = population[: cfg.mu]
    if not np.isfinite(population[0][0]):
        raise RuntimeError("no initial candidate produced a finite loss")

    rate = cfg.mutation_rate
    trace = []
    best = population[0][0]
    stagnant = 0
    for it in range(cfg.iterations):
        offspring = []
        for i in range(cfg.lam):
            parent = population[i % cfg.mu][2]
            child = mutate(parent, rate, rng)
            val = _evaluate(loss, child)
            evaluations += 1
            if np.isfinite(val):
                offspring.append((val, birth, child))
            birth += 1
        merged = sorted(population + offspring, key=lambda t: (t[0], t[1]))
        population = merged[: cfg.mu]
        new_best = population[0][0]
        assert new_best <= best + 1e-15, "elitism violated"
        stagnant = stagnant + 1 if new_best >= best else 0
        best = new_best
        trace.append(best)
        rate = adapt_mutation_rate(EaState(it, rate, best, stagnant), cfg.rate_schedule)
    return EaResult(
        genomes=[g for _, _, g in population],
        losses=[l for l, _, _ in population],
        trace=trace,
        evaluations=evaluations,
    )
