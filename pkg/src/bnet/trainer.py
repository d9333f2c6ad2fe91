"""The full training cycle: evaluate the population, maintain experience
archives and the critic, run the three candidate searches, and select a
robust champion until the task is solved or the budget runs out.

Each iteration: (1) evaluate the champion and the freshly generated
candidates, (2) offer their episodes to the elite archive and the experience
pool, (3) resolve challengers against the champion by repeated evaluation,
(4) refit the critic, (5) generate next iteration's candidates (direct
champion mutation, imitation searches over the two behavior losses, and the
surrogate search), and (6) report which candidate type won the iteration.

Solve checks run on segregated evaluation episodes whose steps and
experiences never feed back into training.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from . import critic as critic_mod
from .behavior import BehaviorSample, LossSpec, METRICS, behavior_loss
from .cgp import CgpConfig, FUNCTION_SET, Genome, decode, mutate, random_genome
from .envs import env_spec, is_solved, make_env, run_episode
from .evolution import EaConfig, run as ea_run
from .experience import (EliteArchive, ExperiencePool, Trajectory,
                         discounted_returns, reference_set)
from .selection import FitnessRecord, SelectionConfig, duel, find_challengers
from .surrogate import (CandidateArchive, SurrogateFitError, fit as kriging_fit,
                        record_from_evaluation, surrogate_search)

GENERATORS = ("mutant", "bdist", "cross", "surrogate")


class _BudgetExhausted(Exception):
    pass


@dataclass(frozen=True)
class BnetConfig:
    env_name: str
    generators: tuple[str, ...] = GENERATORS
    init_population: int = 5
    max_train_steps: int = 50_000
    max_episodes: int = 100_000
    max_iterations: int = 100_000
    # candidate generation
    direct_mutation_rate: float = 0.01
    behavior_mu: int = 20
    behavior_lam: int = 2
    behavior_iterations: int = 1000
    surrogate_mu: int = 8
    surrogate_lam: int = 2
    surrogate_iterations: int = 500
    search_mutation_rate: float = 0.05
    # experience and critic
    gamma: float = 0.99
    archive_capacity: int = 10
    replacement_budget: int = 2
    pool_capacity: int = 50_000
    weight_source: str = "critic"  # or "reward"
    critic_steps: int = 1000
    critic_batch: int = 64
    critic_lr: float = 1e-3
    # surrogate archive
    surrogate_archive_capacity: int = 100
    surrogate_states_per_record: int = 50
    # evaluation modes
    epsilon_init: float = 0.3
    epsilon_mutant: float = 0.0
    repeats: int = 3
    # maze observation noise
    p_noise: float = 0.0
    # network shape
    n_nodes: int = 400
    arity: int = 10
    max_active: int = 200
    weight_low: float = -1.0
    weight_high: float = 1.0
    function_set: tuple[str, ...] = FUNCTION_SET
    # offline initialization
    init_experience: str | None = None
    offline_metric: str = "weighted_behavior_distance"

    def __post_init__(self):
        if not self.generators:
            raise ValueError("at least one candidate generator must be enabled")
        for g in self.generators:
            if g not in GENERATORS:
                raise ValueError(f"unknown generator {g!r}; expected subset of {GENERATORS}")
        if self.weight_source not in ("critic", "reward"):
            raise ValueError(f"unknown weight source {self.weight_source!r}")
        if self.offline_metric not in METRICS:
            raise ValueError(f"unknown offline metric {self.offline_metric!r}")
        if min(self.max_train_steps, self.max_episodes, self.max_iterations) < 0:
            raise ValueError("budgets must be non-negative")


def default_config(env_name: str, variant: str = "base", **overrides) -> BnetConfig:
    """Benchmark defaults per environment and variant."""
    generators = variant_generators(variant)
    per_env: dict = {
        "cartpole": dict(repeats=3, epsilon_init=0.3, max_train_steps=50_000),
        "mountaincar": dict(repeats=3, epsilon_init=0.3, epsilon_mutant=0.3,
                            max_train_steps=150_000),
        "gridmaze": dict(repeats=5, epsilon_init=0.0, weight_source="reward",
                         max_train_steps=5_000),
    }
    if env_name not in per_env:
        raise ValueError(f"unknown environment {env_name!r}")
    kwargs = dict(env_name=env_name, generators=generators, **per_env[env_name])
    kwargs.update(overrides)
    return BnetConfig(**kwargs)


def variant_generators(variant: str) -> tuple[str, ...]:
    """Parse a variant name like 'base', 'mut', or 'bdist+cross'."""
    alias = {"mut": "mutant", "bdist": "bdist", "cross": "cross",
             "surr": "surrogate", "surrogate": "surrogate", "mutant": "mutant"}
    if variant == "base":
        return GENERATORS
    parts = []
    for token in variant.split("+"):
        if token not in alias:
            raise ValueError(
                f"unknown variant {variant!r}; valid: base, mut, bdist, cross, surr "
                f"and '+' combinations")
        parts.append(alias[token])
    return tuple(dict.fromkeys(parts))


@dataclass
class IterationReport:
    iteration: int
    candidates: list[tuple[str, int, float]]  # (type, candidate id, first-eval fitness)
    champion_mean: float
    train_steps: int
    best_type: str


@dataclass
class SelectionEvent:
    iteration: int
    challenger_id: int
    challenger_mean: float
    champion_id: int
    champion_mean: float
    promoted: bool


@dataclass
class RunResult:
    solved: bool
    steps_to_solve: int | None
    train_steps: int
    eval_steps: int
    iterations: int
    episodes: int
    reports: list[IterationReport]
    selection_log: list[SelectionEvent]
    champion_genome: Genome | None
    champion_mean: float | None

    def best_type_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for rep in self.reports:
            counts[rep.best_type] = counts.get(rep.best_type, 0) + 1
        return counts


class BnetTrainer:
    def __init__(self, cfg: BnetConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        self.spec = env_spec(cfg.env_name)
        self.env = make_env(cfg.env_name, p_noise=cfg.p_noise)
        self.check_env = make_env(cfg.env_name, p_noise=cfg.p_noise)
        self.cgp_config = CgpConfig(
            n_inputs=self.spec.observation_dim,
            n_outputs=self.spec.n_actions,
            n_nodes=cfg.n_nodes,
            arity=cfg.arity,
            function_set=cfg.function_set,
            weight_range=(cfg.weight_low, cfg.weight_high),
            max_active=cfg.max_active,
        )
        ss = np.random.SeedSequence(seed)
        (self._rng_init, self._rng_episodes, self._rng_mutant, self._rng_bdist,
         self._rng_cross, self._rng_surr, self._rng_critic, self._rng_check,
         self._rng_offline) = [np.random.default_rng(s) for s in ss.spawn(9)]

        self.archive = EliteArchive(cfg.archive_capacity, cfg.replacement_budget)
        self.pool = ExperiencePool(cfg.pool_capacity)
        self.cand_archive = CandidateArchive(cfg.surrogate_archive_capacity)
        self.critic = critic_mod.ValueNet(self.spec.observation_dim, self._rng_critic)
        self.critic_cfg = critic_mod.CriticTrainConfig(
            steps=cfg.critic_steps, batch_size=cfg.critic_batch, learning_rate=cfg.critic_lr)
        self.selection_cfg = SelectionConfig(r=cfg.repeats)

        self.genomes: dict[int, Genome] = {}
        self.phenotypes: dict[int, object] = {}
        self.records: dict[int, FitnessRecord] = {}
        self._surrogate_seen: set[int] = set()
        self._next_id = 0
        self.champion_id: int | None = None
        self.pending: list[tuple[str, Genome]] = []
        self.iteration = 0
        self.train_steps = 0
        self.eval_steps = 0
        self.episodes = 0
        self.reports: list[IterationReport] = []
        self.selection_log: list[SelectionEvent] = []

    # --- bookkeeping ---------------------------------------------------------

    def _register(self, genome: Genome) -> int:
        cid = self._next_id
        self._next_id += 1
        self.genomes[cid] = genome
        self.phenotypes[cid] = decode(genome)
        self.records[cid] = FitnessRecord(cid)
        return cid

    @property
    def champion_record(self) -> FitnessRecord:
        return self.records[self.champion_id]

    def _fitness(self, trajectory: Trajectory) -> float:
        if self.cfg.env_name == "gridmaze":
            return self.env.progress_fitness(trajectory)
        return trajectory.fitness

    def _check_budget(self) -> None:
        if (self.train_steps >= self.cfg.max_train_steps
                or self.episodes >= self.cfg.max_episodes):
            raise _BudgetExhausted

    def _evaluate(self, cid: int, mode: str = "deterministic", epsilon: float = 0.0) -> float:
        """One training evaluation episode: updates the record, the elite
        archive, the experience pool and the surrogate candidate archive."""
        self._check_budget()
        traj = run_episode(self.env, self.phenotypes[cid], self._rng_episodes,
                           mode=mode, epsilon=epsilon, source_id=cid)
        self.train_steps += len(traj)
        self.episodes += 1
        traj.returns = discounted_returns(traj, self.cfg.gamma)
        fitness = self._fitness(traj)
        self.records[cid].add(fitness)
        self.archive.offer(traj, fitness)
        self.pool.append_trajectory(traj)
        if cid not in self._surrogate_seen:
            self._surrogate_seen.add(cid)
            self.cand_archive.add(record_from_evaluation(
                self.genomes[cid], traj.states(), traj.probabilities(),
                self.records[cid].mean, max_states=self.cfg.surrogate_states_per_record))
        return fitness

    # --- candidate generation --------------------------------------------------

    def _reference_samples(self) -> list[BehaviorSample]:
        samples = []
        for sample, entry in zip(reference_set(self.archive), self.archive.entries):
            weights = critic_mod.step_weights(
                entry.trajectory, self.cfg.weight_source,
                self.critic if self.cfg.weight_source == "critic" else None)
            samples.append(sample.with_weights(weights))
        return samples

    def _behavior_candidate(self, metric: str, rng: np.random.Generator) -> Genome:
        spec = LossSpec(metric, tuple(self._reference_samples()))
        cfg = EaConfig(self.cfg.behavior_mu, self.cfg.behavior_lam,
                       self.cfg.behavior_iterations, self.cfg.search_mutation_rate,
                       seeds=(self.genomes[self.champion_id],))
        result = ea_run(cfg, self.cgp_config,
                        lambda g: behavior_loss(decode(g), spec), rng)
        return result.best_genome

    def _surrogate_candidate(self) -> Genome | None:
        if len(self.cand_archive) < 3:
            return None
        try:
            model = kriging_fit(self.cand_archive.records,
                                distance_matrix=self.cand_archive.distance_matrix())
        except SurrogateFitError as err:
            warnings.warn(f"surrogate fit failed, skipping candidate: {err}", RuntimeWarning)
            return None
        cfg = EaConfig(self.cfg.surrogate_mu, self.cfg.surrogate_lam,
                       self.cfg.surrogate_iterations, self.cfg.search_mutation_rate,
                       seeds=(self.genomes[self.champion_id],))
        return surrogate_search(model, cfg, self.cgp_config, self._rng_surr).best_genome

    def _generate_candidates(self) -> list[tuple[str, Genome]]:
        out = []
        champion = self.genomes[self.champion_id]
        for gen in self.cfg.generators:
            if gen == "mutant":
                out.append(("mutant", mutate(champion, self.cfg.direct_mutation_rate,
                                             self._rng_mutant)))
            elif gen == "bdist":
                out.append(("bdist", self._behavior_candidate(
                    "weighted_behavior_distance", self._rng_bdist)))
            elif gen == "cross":
                out.append(("cross", self._behavior_candidate(
                    "weighted_cross_entropy", self._rng_cross)))
            elif gen == "surrogate":
                g = self._surrogate_candidate()
                if g is not None:
                    out.append(("surrogate", g))
        return out

    # --- initialization ----------------------------------------------------------

    def _initial_genomes(self) -> list[Genome]:
        if self.cfg.init_experience is None:
            return [random_genome(self.cgp_config, self._rng_init)
                    for _ in range(self.cfg.init_population)]
        return self.init_offline(load_experience(self.cfg.init_experience))

    def init_offline(self, references: list[BehaviorSample]) -> list[Genome]:
        """Population fitted to stored reference behaviors; consumes zero
        environment interactions."""
        if not references:
            raise ValueError("empty experience set for offline initialization")
        spec = LossSpec(self.cfg.offline_metric, tuple(references))
        cfg = EaConfig(max(self.cfg.behavior_mu, self.cfg.init_population),
                       self.cfg.behavior_lam, self.cfg.behavior_iterations,
                       self.cfg.search_mutation_rate)
        result = ea_run(cfg, self.cgp_config,
                        lambda g: behavior_loss(decode(g), spec), self._rng_offline)
        return result.genomes[: self.cfg.init_population]

    # --- the cycle ---------------------------------------------------------------

    def run_iteration(self) -> IterationReport:
        if self._surrogate_seen is None:
            self._surrogate_seen = set()
        self._check_budget()
        self.iteration += 1
        self.archive.begin_iteration()
        fresh: list[tuple[str, int]] = []

        if self.iteration == 1:
            init_mode = "explore" if self.cfg.epsilon_init > 0 else "deterministic"
            for genome in self._initial_genomes():
                cid = self._register(genome)
                self._evaluate(cid, mode=init_mode, epsilon=self.cfg.epsilon_init)
                fresh.append(("init", cid))
            # bootstrap: highest single-sample candidate becomes champion
            self.champion_id = max(fresh, key=lambda tc: self.records[tc[1]].samples[0])[1]
        else:
            self._evaluate(self.champion_id)  # standing champion re-evaluation
            for ctype, genome in self.pending:
                cid = self._register(genome)
                if ctype == "mutant" and self.cfg.epsilon_mutant > 0:
                    self._evaluate(cid, mode="explore", epsilon=self.cfg.epsilon_mutant)
                else:
                    self._evaluate(cid)
                fresh.append((ctype, cid))
            challengers = find_challengers(
                [self.records[cid] for _, cid in fresh], self.champion_record)
            for challenger in challengers:
                champ = self.champion_record
                if challenger.samples[0] <= champ.mean:
                    continue  # no longer superior after a promotion
                survivor, promoted = duel(
                    champ, challenger, self.selection_cfg,
                    lambda rec: self._evaluate(rec.candidate_id))
                self.selection_log.append(SelectionEvent(
                    self.iteration, challenger.candidate_id, challenger.mean,
                    champ.candidate_id, champ.mean, promoted))
                if promoted:
                    self.champion_id = survivor.candidate_id

        if self.cfg.weight_source == "critic" and len(self.pool) > 0:
            critic_mod.fit(self.critic, self.pool, self.critic_cfg, self._rng_critic)

        self.pending = self._generate_candidates()

        champ_mean = self.champion_record.mean
        candidates = [(ctype, cid, self.records[cid].samples[0]) for ctype, cid in fresh]
        if self.iteration == 1:
            best_type = "init"
        else:
            best_fresh = max(candidates, key=lambda t: t[2]) if candidates else None
            if best_fresh is None or best_fresh[2] <= champ_mean:
                best_type = "champion"
            else:
                best_type = best_fresh[0]
        report = IterationReport(self.iteration, candidates, champ_mean,
                                 self.train_steps, best_type)
        self.reports.append(report)
        return report

    def _solve_threshold(self) -> float:
        return {"cartpole": 195.0, "mountaincar": -110.0, "gridmaze": 23.0}[self.cfg.env_name]

    def solve_check(self) -> bool:
        """Segregated evaluation episodes; their steps and experiences are
        tracked separately and never fed back into training."""
        phenotype = self.phenotypes[self.champion_id]
        history = []
        for _ in range(self.spec.solve_window):
            traj = run_episode(self.check_env, phenotype, self._rng_check,
                               mode="deterministic")
            if self.cfg.env_name == "gridmaze":
                history.append(self.check_env.progress_fitness(traj))
            else:
                history.append(traj.fitness)
            self.eval_steps += len(traj)
        return is_solved(self.spec, history)

    def run(self) -> RunResult:
        if self._surrogate_seen is None:
            self._surrogate_seen = set()
        solved = False
        steps_to_solve = None
        try:
            while (self.iteration < self.cfg.max_iterations
                   and self.episodes < self.cfg.max_episodes
                   and self.train_steps < self.cfg.max_train_steps):
                self.run_iteration()
                # solve checks are costly; only run them when the champion's
                # training mean already clears the target
                if (self.champion_id is not None
                        and self.champion_record.mean >= self._solve_threshold()
                        and self.solve_check()):
                    solved = True
                    steps_to_solve = self.train_steps
                    break
        except _BudgetExhausted:
            pass
        champion_genome = self.genomes.get(self.champion_id)
        champion_mean = (self.champion_record.mean
                         if self.champion_id is not None and self.champion_record.samples
                         else None)
        return RunResult(
            solved=solved, steps_to_solve=steps_to_solve, train_steps=self.train_steps,
            eval_steps=self.eval_steps, iterations=self.iteration, episodes=self.episodes,
            reports=self.reports, selection_log=self.selection_log,
            champion_genome=champion_genome, champion_mean=champion_mean,
        )


# --- experience files ---------------------------------------------------------

EXPERIENCE_TAG = "bnet-experience"
EXPERIENCE_VERSION = 1


def save_experience(references: list[BehaviorSample], path, env_name: str = "") -> None:
    payload = {
        "format": EXPERIENCE_TAG,
        "version": EXPERIENCE_VERSION,
        "env": env_name,
        "references": [
            {
                "states": ref.states.tolist(),
                "actions": ref.actions.tolist(),
                "probs": ref.ref_probs.tolist(),
                "weights": ref.weights.tolist(),
            }
            for ref in references
        ],
    }
    with open(path, "w", encoding="ascii") as fh:
        json.dump(payload, fh)


def load_experience(path) -> list[BehaviorSample]:
    with open(path, "r", encoding="ascii") as fh:
        payload = json.load(fh)
    if payload.get("format") != EXPERIENCE_TAG:
        raise ValueError(f"not a {EXPERIENCE_TAG} file: {path}")
    if payload.get("version") != EXPERIENCE_VERSION:
        raise ValueError(f"unsupported experience version {payload.get('version')!r}")
    refs = payload.get("references", [])
    if not refs:
        raise ValueError(f"experience file has no references: {path}")
    out = []
    for ref in refs:
        out.append(BehaviorSample(
            states=np.asarray(ref["states"], dtype=np.float64),
            actions=np.asarray(ref["actions"], dtype=np.int64),
            ref_probs=np.asarray(ref["probs"], dtype=np.float64),
            weights=np.asarray(ref["weights"], dtype=np.float64),
        ))
    return out
