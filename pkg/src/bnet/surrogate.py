"""Kriging regression over behavior distances, used as a search surrogate.

Tested candidates are archived together with states from their own episodes
and their mean fitness. The model kernel is ``exp(-theta * d)`` where ``d``
is the mean L1 behavior distance between two policies, evaluated on the
*combined* stored states of the pair. Kernel width and nugget are fitted by
maximizing the concentrated log-likelihood with a deterministic coarse
log-grid scan followed by coordinate-wise golden-section refinement. Because
behavior-distance kernels need not be positive definite, the nugget also
serves as the regularizer that makes the correlation matrix factorizable.

Responses are stored negated (the search minimizes), and ``predict_mean``
converts back so callers always see predicted *fitness*.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .behavior import _as_prob_matrix
from .cgp import CgpConfig, Genome, decode
from .evolution import EaConfig, EaResult, run as ea_run

THETA_BOUNDS = (1e-3, 1e3)
ETA_BOUNDS = (1e-8, 1e-1)
GRID_SIZE = 32
MAX_ESCALATED_ETA = 1e2


class SurrogateFitError(RuntimeError):
    pass


@dataclass
class CandidateRecord:
    genome: Genome
    states: np.ndarray  # (T, obs_dim) from the candidate's own evaluations
    probs: np.ndarray   # (T, n_actions) the candidate's distribution on those states
    mean_fitness: float
    uid: int = -1

    def __post_init__(self):
        if self.states.shape[0] < 1:
            raise ValueError("candidate record needs at least one stored state")
        if self.probs.shape[0] != self.states.shape[0]:
            raise ValueError("states and probs differ in length")


def record_from_evaluation(genome: Genome, states: np.ndarray, probs: np.ndarray,
                           mean_fitness: float, uid: int = -1,
                           max_states: int = 50) -> CandidateRecord:
    """Build an archive record, subsampling stored states evenly if the
    episode is longer than ``max_states`` (keeps model fitting affordable)."""
    n = states.shape[0]
    if n > max_states:
        idx = np.linspace(0, n - 1, max_states).astype(np.int64)
        states, probs = states[idx], probs[idx]
    return CandidateRecord(genome, np.asarray(states), np.asarray(probs), float(mean_fitness), uid)


def pairwise_distance(rec_a: CandidateRecord, rec_b: CandidateRecord) -> float:
    """Behavior distance on the concatenation of both records' stored states
    (duplicates retained)."""
    states = np.concatenate([rec_a.states, rec_b.states], axis=0)
    pa = np.concatenate([rec_a.probs, _as_prob_matrix(decode(rec_a.genome), rec_b.states)])
    pb = np.concatenate([_as_prob_matrix(decode(rec_b.genome), rec_a.states), rec_b.probs])
    assert pa.shape[0] == states.shape[0]
    return float(np.abs(pa - pb).sum(axis=1).mean())


class CandidateArchive:
    """Rolling archive of evaluated candidates with a persistent pairwise
    distance cache, capped at the most recent ``capacity`` records."""

    def __init__(self, capacity: int = 100):
        self.capacity = capacity
        self.records: list[CandidateRecord] = []
        self._dist: dict[tuple[int, int], float] = {}
        self._next_uid = 0

    def __len__(self) -> int:
        return len(self.records)

    def add(self, record: CandidateRecord) -> None:
        record.uid = self._next_uid
        self._next_uid += 1
        for other in self.records:
            key = (other.uid, record.uid)
            self._dist[key] = pairwise_distance(other, record)
        self.records.append(record)
        if len(self.records) > self.capacity:
            dropped = self.records.pop(0)
            self._dist = {k: v for k, v in self._dist.items() if dropped.uid not in k}

    def distance_matrix(self) -> np.ndarray:
        n = len(self.records)
        D = np.zeros((n, n))
        for i, j in itertools.combinations(range(n), 2):
            a, b = self.records[i].uid, self.records[j].uid
            D[i, j] = D[j, i] = self._dist[(min(a, b), max(a, b))]
        return D


@dataclass
class KrigingModel:
    records: list[CandidateRecord]
    theta: float
    eta: float
    distances: np.ndarray          # (n, n) pairwise behavior distances
    chol: np.ndarray               # lower Cholesky factor of K + eta*I
    process_mean: float            # of the negated responses
    process_var: float
    responses: np.ndarray          # negated mean fitnesses
    alpha: np.ndarray              # (K + eta I)^-1 (y - mean)
    constant: bool = False         # all responses equal: predictions are flat
    # prediction support: concatenated record states and slice offsets
    pred_states: np.ndarray = None
    pred_offsets: np.ndarray = None


def _chol_solve(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    z = np.linalg.solve(L, b)
    return np.linalg.solve(L.T, z)


def _likelihood(D: np.ndarray, y: np.ndarray, theta: float, eta: float) -> float:
    """Concentrated log-likelihood of the constant-mean model; -inf when the
    regularized correlation matrix fails to factor."""
    n = len(y)
    K = np.exp(-theta * D) + eta * np.eye(n)
    try:
        L = np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        return -np.inf
    ones = np.ones(n)
    Ki_y = _chol_solve(L, y)
    Ki_1 = _chol_solve(L, ones)
    mu = float(ones @ Ki_y) / float(ones @ Ki_1)
    resid = y - mu
    sigma2 = float(resid @ _chol_solve(L, resid)) / n
    if sigma2 <= 0:
        return -np.inf
    log_det = 2.0 * float(np.sum(np.log(np.diag(L))))
    return -0.5 * (n * math.log(sigma2) + log_det)


def _golden_refine(f, lo: float, hi: float, tol: float = 1e-3, max_iter: int = 40) -> float:
    """Golden-section maximization of a 1-d function on [lo, hi]."""
    invphi = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a < tol:
            break
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return (a + b) / 2


def fit(records: list[CandidateRecord],
        distance_matrix: np.ndarray | None = None,
        theta_bounds: tuple[float, float] = THETA_BOUNDS,
        eta_bounds: tuple[float, float] = ETA_BOUNDS) -> KrigingModel:
    """Fit kernel width and nugget by maximum likelihood over a bounded
    log-scale domain; deterministic."""
    if len(records) < 3:
        raise ValueError(f"need at least 3 records to fit, got {len(records)}")
    y = -np.asarray([r.mean_fitness for r in records], dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise ValueError("non-finite response")
    n = len(records)
    if distance_matrix is None:
        D = np.zeros((n, n))
        for i, j in itertools.combinations(range(n), 2):
            D[i, j] = D[j, i] = pairwise_distance(records[i], records[j])
    else:
        D = np.asarray(distance_matrix, dtype=np.float64)

    constant = bool(np.ptp(y) == 0.0)
    if constant:
        theta, eta = 1.0, eta_bounds[0]
    else:
        lt_lo, lt_hi = math.log(theta_bounds[0]), math.log(theta_bounds[1])
        le_lo, le_hi = math.log(eta_bounds[0]), math.log(eta_bounds[1])
        best = (-np.inf, lt_lo, le_lo)
        for lt in np.linspace(lt_lo, lt_hi, GRID_SIZE):
            for le in np.linspace(le_lo, le_hi, GRID_SIZE):
                ll = _likelihood(D, y, math.exp(lt), math.exp(le))
                if ll > best[0]:
                    best = (ll, lt, le)
        if not np.isfinite(best[0]):
            raise SurrogateFitError("likelihood not finite anywhere on the search grid")
        _, lt, le = best
        for _ in range(2):  # alternate coordinate refinements
            lt = _golden_refine(lambda v: _likelihood(D, y, math.exp(v), math.exp(le)), lt_lo, lt_hi)
            le = _golden_refine(lambda v: _likelihood(D, y, math.exp(lt), math.exp(v)), le_lo, le_hi)
        theta, eta = math.exp(lt), math.exp(le)

    L = None
    while L is None:
        K = np.exp(-theta * D) + eta * np.eye(n)
        try:
            L = np.linalg.cholesky(K)
        except np.linalg.LinAlgError:
            eta *= 10.0  # nugget escalation absorbs kernel indefiniteness
            if eta > MAX_ESCALATED_ETA:
                raise SurrogateFitError(
                    f"correlation matrix not factorizable even with nugget {eta:.3g}")
    ones = np.ones(n)
    Ki_y = _chol_solve(L, y)
    Ki_1 = _chol_solve(L, ones)
    mu = float(ones @ Ki_y) / float(ones @ Ki_1)
    resid = y - mu
    alpha = _chol_solve(L, resid)
    sigma2 = float(resid @ alpha) / n
    offsets = np.concatenate([[0], np.cumsum([r.states.shape[0] for r in records])])
    return KrigingModel(
        records=list(records), theta=theta, eta=eta, distances=D, chol=L,
        process_mean=mu, process_var=sigma2, responses=y, alpha=alpha,
        constant=constant,
        pred_states=np.concatenate([r.states for r in records], axis=0),
        pred_offsets=offsets,
    )


def kernel_value(model: KrigingModel, distance: float) -> float:
    return float(math.exp(-model.theta * distance))


def _candidate_distances(model: KrigingModel, policy, states: np.ndarray | None) -> np.ndarray:
    """Distances from a candidate policy to every training record.

    Without candidate states, each distance is evaluated on the record's own
    stored states; with states, on the concatenation of both sets.
    """
    probs = _as_prob_matrix(policy, model.pred_states)
    off = model.pred_offsets
    d = np.empty(len(model.records))
    for i, rec in enumerate(model.records):
        diff = np.abs(probs[off[i]: off[i + 1]] - rec.probs).sum(axis=1)
        if states is None:
            d[i] = diff.mean()
        else:
            rec_policy = decode(rec.genome)
            cross = np.abs(_as_prob_matrix(rec_policy, states)
                           - _as_prob_matrix(policy, states)).sum(axis=1)
            d[i] = np.concatenate([diff, cross]).mean()
    return d


def predict_mean(model: KrigingModel, candidate, states: np.ndarray | None = None) -> float:
    """Predicted mean fitness of a candidate genome or policy."""
    if model.constant:
        return float(-model.process_mean)
    policy = decode(candidate) if isinstance(candidate, Genome) else candidate
    d = _candidate_distances(model, policy, states)
    psi = np.exp(-model.theta * d)
    z = model.process_mean + float(psi @ model.alpha)
    return -z


def surrogate_search(model: KrigingModel, ea_cfg: EaConfig, cgp_config: CgpConfig,
                     rng: np.random.Generator) -> EaResult:
    """Search the surrogate for the candidate with the best predicted fitness.

    Pure model optimization: no environment interaction happens here.
    """
    def loss(genome: Genome) -> float:
        return -predict_mean(model, genome)

    return ea_run(ea_cfg, cgp_config, loss, rng)
