"""Cartesian genetic programming networks used as stochastic policies.

Genomes are grid encodings with one row of nodes. Gene addresses share a
single index space: indices ``0 .. n_inputs-1`` are the input terminals and
index ``n_inputs + i`` is node ``i``. Connections always point backwards
(to inputs or lower-index nodes), so decoded graphs are acyclic by
construction. Decoded phenotypes are capped at ``max_active`` nodes; both
initialization and mutation enforce the cap.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

FUNCTION_SET = ("tanh", "sigmoid", "gaussian", "step", "relu")

_FUNCS = {
    "tanh": np.tanh,
    "sigmoid": lambda x: 1.0 / (1.0 + np.exp(-x)),
    "gaussian": lambda x: np.exp(-np.square(x)),
    "step": lambda x: (x >= 0.0).astype(np.float64),
    "relu": lambda x: np.maximum(x, 0.0),
}


class InvalidConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CgpConfig:
    n_inputs: int
    n_outputs: int
    n_nodes: int = 400
    arity: int = 10
    function_set: tuple[str, ...] = FUNCTION_SET
    weight_range: tuple[float, float] = (-1.0, 1.0)
    levels_back: int | None = None  # None = unrestricted
    max_active: int = 200

    def __post_init__(self):
        if self.n_inputs < 1 or self.n_outputs < 1:
            raise InvalidConfigError("need at least one input and one output")
        if self.n_nodes < 1 or self.arity < 1 or self.max_active < 1:
            raise InvalidConfigError("n_nodes, arity and max_active must be positive")
        if not self.function_set:
            raise InvalidConfigError("empty function set")
        for fn in self.function_set:
            if fn not in _FUNCS:
                raise InvalidConfigError(f"unknown node function {fn!r}")
        lo, hi = self.weight_range
        if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
            raise InvalidConfigError(f"bad weight range {self.weight_range!r}")
        if self.levels_back is not None and self.levels_back < 1:
            raise InvalidConfigError("levels_back must be positive or None")


@dataclass(frozen=True)
class NodeGene:
    function: str
    connections: tuple[int, ...]
    weights: tuple[float, ...]


@dataclass(frozen=True)
class Genome:
    """Immutable CGP genotype. Arrays are never mutated after construction."""

    config: CgpConfig
    functions: np.ndarray   # (n_nodes,) int, index into config.function_set
    connections: np.ndarray  # (n_nodes, arity) int, backward addresses
    weights: np.ndarray      # (n_nodes, arity) float
    output_genes: np.ndarray  # (n_outputs,) int

    def __post_init__(self):
        for arr in (self.functions, self.connections, self.weights, self.output_genes):
            arr.setflags(write=False)

    @property
    def nodes(self) -> list[NodeGene]:
        fs = self.config.function_set
        return [
            NodeGene(fs[int(f)], tuple(int(c) for c in conn), tuple(float(w) for w in wts))
            for f, conn, wts in zip(self.functions, self.connections, self.weights)
        ]

    def equal(self, other: "Genome") -> bool:
        return (
            np.array_equal(self.functions, other.functions)
            and np.array_equal(self.connections, other.connections)
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.output_genes, other.output_genes)
        )


def _connection_bounds(config: CgpConfig) -> np.ndarray:
    """Size of the legal address domain for each node's connection genes."""
    idx = np.arange(config.n_nodes)
    if config.levels_back is None:
        return config.n_inputs + idx
    return config.n_inputs + np.minimum(idx, config.levels_back)


def _domain_to_address(config: CgpConfig, node_idx, k):
    """Map a draw k in [0, domain_size) to a legal address for the node."""
    if config.levels_back is None:
        return k
    # first n_inputs slots are terminals, the rest the trailing window of nodes
    window_start = np.maximum(node_idx - config.levels_back, 0)
    return np.where(k < config.n_inputs, k, config.n_inputs + window_start + (k - config.n_inputs))


def active_nodes(genome: Genome) -> list[int]:
    """Node indices transitively referenced from the output genes, ascending."""
    n_in = genome.config.n_inputs
    seen = np.zeros(genome.config.n_nodes, dtype=bool)
    stack = [int(g) - n_in for g in genome.output_genes if int(g) >= n_in]
    conn = genome.connections
    while stack:
        i = stack.pop()
        if seen[i]:
            continue
        seen[i] = True
        for c in conn[i].tolist():
            if c >= n_in and not seen[c - n_in]:
                stack.append(c - n_in)
    return np.nonzero(seen)[0].tolist()


def random_genome(config: CgpConfig, rng: np.random.Generator) -> Genome:
    """Sample a uniform random genome honoring the active-node cap.

    If the decoded active set exceeds the cap, output genes are resampled
    from a progressively shrinking address range; in the limit they point at
    input terminals (zero active nodes), so the repair always terminates.
    """
    functions = rng.integers(0, len(config.function_set), size=config.n_nodes)
    bounds = _connection_bounds(config)
    draws = (rng.random((config.n_nodes, config.arity)) * bounds[:, None]).astype(np.int64)
    connections = _domain_to_address(config, np.arange(config.n_nodes)[:, None], draws)
    lo, hi = config.weight_range
    weights = rng.uniform(lo, hi, size=(config.n_nodes, config.arity))
    out_bound = config.n_inputs + config.n_nodes
    output_genes = rng.integers(0, out_bound, size=config.n_outputs)
    genome = Genome(config, functions, connections, weights, output_genes)
    while len(active_nodes(genome)) > config.max_active:
        out_bound = max(config.n_inputs, out_bound // 2)
        output_genes = rng.integers(0, out_bound, size=config.n_outputs)
        genome = Genome(config, functions, connections, weights, output_genes)
    return genome


@dataclass(frozen=True)
class Phenotype:
    """Active subgraph compiled for batched evaluation.

    Values live in a buffer whose first ``n_inputs`` slots hold the state and
    whose remaining slots hold active-node outputs in topological (ascending
    index) order. Nodes are grouped into levels so each level can be
    evaluated with a single gather + weighted sum.
    """

    config: CgpConfig
    active: tuple[int, ...]
    levels: tuple[tuple, ...] = field(repr=False)  # (slots, conn, weights, fn_groups)
    out_pos: np.ndarray = field(repr=False)

    @property
    def n_active(self) -> int:
        return len(self.active)

    def forward_batch(self, states: np.ndarray) -> np.ndarray:
        """Action probabilities (softmax over readouts) for a batch of states."""
        states = np.asarray(states, dtype=np.float64)
        if states.ndim != 2 or states.shape[1] != self.config.n_inputs:
            raise ValueError(
                f"expected states of shape (batch, {self.config.n_inputs}), got {states.shape}"
            )
        if not np.all(np.isfinite(states)):
            raise ValueError("non-finite state entries")
        batch = states.shape[0]
        buf = np.empty((batch, self.config.n_inputs + len(self.active)))
        buf[:, : self.config.n_inputs] = states
        for slots, conn, wts, fn_groups in self.levels:
            pre = np.einsum("bma,ma->bm", buf[:, conn], wts)
            out = np.empty_like(pre)
            for fn, cols in fn_groups:
                out[:, cols] = _FUNCS[fn](pre[:, cols])
            buf[:, slots] = out
        return _softmax(buf[:, self.out_pos])

    def forward(self, state: Sequence[float]) -> np.ndarray:
        state = np.asarray(state, dtype=np.float64)
        if state.ndim != 1 or state.shape[0] != self.config.n_inputs:
            raise ValueError(f"expected state of length {self.config.n_inputs}, got shape {state.shape}")
        return self.forward_batch(state[None, :])[0]

    __call__ = forward


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def decode(genome: Genome) -> Phenotype:
    config = genome.config
    active = active_nodes(genome)
    n_active = len(active)
    if n_active > config.max_active:
        raise ValueError(f"{n_active} active nodes exceeds cap {config.max_active}")
    n_in = config.n_inputs
    # buffer position of each address (input slots first, actives in index order)
    pos = np.full(n_in + config.n_nodes, -1, dtype=np.int64)
    pos[:n_in] = np.arange(n_in)
    for rank, node in enumerate(active):
        pos[n_in + node] = n_in + rank

    level_of = np.zeros(n_in + n_active, dtype=np.int64)
    rows_by_level: dict[int, list[int]] = {}
    for rank, node in enumerate(active):
        conn_pos = pos[genome.connections[node]]
        lvl = int(level_of[conn_pos].max()) + 1
        level_of[n_in + rank] = lvl
        rows_by_level.setdefault(lvl, []).append(rank)

    levels = []
    for lvl in sorted(rows_by_level):
        ranks = rows_by_level[lvl]
        nodes = [active[r] for r in ranks]
        slots = np.asarray([n_in + r for r in ranks])
        conn = pos[genome.connections[nodes]]
        wts = genome.weights[nodes]
        fns = genome.functions[nodes]
        fn_groups = []
        for f in np.unique(fns):
            cols = np.nonzero(fns == f)[0]
            fn_groups.append((config.function_set[int(f)], cols))
        levels.append((slots, conn, wts, tuple(fn_groups)))

    out_pos = pos[genome.output_genes]
    return Phenotype(config, tuple(active), tuple(levels), out_pos)


def mutate(genome: Genome, rate: float, rng: np.random.Generator) -> Genome:
    """Point mutation: every gene is independently resampled with probability
    ``rate``. Resampled values are uniform over the gene's full legal domain
    (so a resample may reproduce the parent value).

    Mutations whose decoded active set would exceed the cap are repaired:
    the offending topology genes are re-resampled up to 50 times each and
    revert to the parent gene if no legal draw is found.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"mutation rate {rate} outside [0, 1]")
    config = genome.config
    n, a = config.n_nodes, config.arity
    lo, hi = config.weight_range

    fn_mask = rng.random(n) < rate
    conn_mask = rng.random((n, a)) < rate
    wt_mask = rng.random((n, a)) < rate
    out_mask = rng.random(config.n_outputs) < rate

    functions = genome.functions.copy()
    functions[fn_mask] = rng.integers(0, len(config.function_set), size=int(fn_mask.sum()))
    weights = genome.weights.copy()
    weights[wt_mask] = rng.uniform(lo, hi, size=int(wt_mask.sum()))

    bounds = _connection_bounds(config)
    connections = genome.connections.copy()
    rows, cols = np.nonzero(conn_mask)
    draws = (rng.random(rows.shape[0]) * bounds[rows]).astype(np.int64)
    connections[rows, cols] = _domain_to_address(config, rows, draws)

    out_bound = config.n_inputs + config.n_nodes
    output_genes = genome.output_genes.copy()
    output_genes[out_mask] = rng.integers(0, out_bound, size=int(out_mask.sum()))

    child = Genome(config, functions, connections, weights, output_genes)
    if len(active_nodes(child)) <= config.max_active:
        return child

    # Rare path: re-apply topology genes one by one against the cap.
    connections = genome.connections.copy()
    output_genes = genome.output_genes.copy()

    def count_active():
        return len(active_nodes(Genome(config, functions, connections, weights, output_genes)))

    for r, c in zip(rows.tolist(), cols.tolist()):
        parent_val = connections[r, c]
        for _ in range(50):
            k = int(rng.random() * bounds[r])
            connections[r, c] = int(np.asarray(_domain_to_address(config, r, k)))
            if count_active() <= config.max_active:
                break
            connections[r, c] = parent_val
    for j in np.nonzero(out_mask)[0].tolist():
        parent_val = output_genes[j]
        for _ in range(50):
            output_genes[j] = int(rng.integers(0, out_bound))
            if count_active() <= config.max_active:
                break
            output_genes[j] = parent_val
    return Genome(config, functions, connections, weights, output_genes)


# --- checkpoint format -------------------------------------------------------
#
# Versioned flat text record: a header line, config lines, then one line per
# gene array. Floats are hex-encoded (float.hex) so round-trips are exact.

FORMAT_TAG = "bnet-genome"
FORMAT_VERSION = 1


def _floats_to_text(arr: np.ndarray) -> str:
    return " ".join(float(v).hex() for v in np.asarray(arr).ravel())


def _ints_to_text(arr: np.ndarray) -> str:
    return " ".join(str(int(v)) for v in np.asarray(arr).ravel())


def save_genome(genome: Genome, path) -> None:
    config = genome.config
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"{FORMAT_TAG} v{FORMAT_VERSION}\n")
        fh.write(
            f"n_inputs={config.n_inputs} n_outputs={config.n_outputs} "
            f"n_nodes={config.n_nodes} arity={config.arity} max_active={config.max_active}\n"
        )
        fh.write(f"functions={','.join(config.function_set)}\n")
        lb = "unrestricted" if config.levels_back is None else str(config.levels_back)
        fh.write(f"levels_back={lb}\n")
        fh.write(f"weight_range={_floats_to_text(np.asarray(config.weight_range))}\n")
        fh.write(f"fn {_ints_to_text(genome.functions)}\n")
        fh.write(f"conn {_ints_to_text(genome.connections)}\n")
        fh.write(f"w {_floats_to_text(genome.weights)}\n")
        fh.write(f"out {_ints_to_text(genome.output_genes)}\n")


def load_genome(path) -> Genome:
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or not lines[0].startswith(FORMAT_TAG):
        raise ValueError(f"not a {FORMAT_TAG} file: {path}")
    if lines[0] != f"{FORMAT_TAG} v{FORMAT_VERSION}":
        raise ValueError(f"unsupported checkpoint version: {lines[0]!r}")
    header = dict(kv.split("=") for kv in lines[1].split())
    fn_set = tuple(lines[2].split("=", 1)[1].split(","))
    lb_txt = lines[3].split("=", 1)[1]
    wlo, whi = (float.fromhex(t) for t in lines[4].split("=", 1)[1].split())
    config = CgpConfig(
        n_inputs=int(header["n_inputs"]),
        n_outputs=int(header["n_outputs"]),
        n_nodes=int(header["n_nodes"]),
        arity=int(header["arity"]),
        function_set=fn_set,
        weight_range=(wlo, whi),
        levels_back=None if lb_txt == "unrestricted" else int(lb_txt),
        max_active=int(header["max_active"]),
    )
    fields = {}
    for ln in lines[5:]:
        if not ln:
            continue
        key, _, payload = ln.partition(" ")
        fields[key] = payload
    functions = np.asarray([int(t) for t in fields["fn"].split()])
    connections = np.asarray([int(t) for t in fields["conn"].split()]).reshape(
        config.n_nodes, config.arity
    )
    weights = np.asarray([float.fromhex(t) for t in fields["w"].split()]).reshape(
        config.n_nodes, config.arity
    )
    output_genes = np.asarray([int(t) for t in fields["out"].split()])
    return Genome(config, functions, connections, weights, output_genes)
