"""Obtainability, species partition and the ergodicity verdict."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .envpath import ensure_multistate, simulate_cycles
from .model import ModulatedNetwork, mean_production_check
from .propagator import Propagator
from .rng import DEFAULT_SEED, map_blocks

UCB_Z = 2.326  # one-sided 99% normal quantile

NOT_DEGRADED = "properly produced, not properly degraded"


class BudgetExhausted(RuntimeError):
    """No alpha up to the budget passed; ``table`` holds what was measured."""

    def __init__(self, message: str, table):
        super().__init__(message)
        self.table = table


def conversion_graph(net: ModulatedNetwork) -> np.ndarray:
    """``adj[i, j]`` is true when ``S_i -> S_j`` fires in some environment state."""
    return (net.conversion_rates > 0).any(axis=0)


def obtainable(net: ModulatedNetwork) -> np.ndarray:
    """Reflexive-transitive closure of the conversion digraph."""
    reach = conversion_graph(net) | np.eye(net.d, dtype=bool)
    # repeated squaring of the boolean relation; log2(d) rounds suffice
    while True:
        nxt = (reach.astype(np.int64) @ reach.astype(np.int64)) > 0
        if np.array_equal(nxt, reach):
            return reach
        reach = nxt


def properly_produced(net: ModulatedNetwork, reach: np.ndarray | None = None) -> np.ndarray:
    reach = obtainable(net) if reach is None else reach
    produced = (net.production_rates > 0).any(axis=0)
    return reach[produced].any(axis=0) if produced.any() else np.zeros(net.d, dtype=bool)


def properly_degraded(net: ModulatedNetwork, reach: np.ndarray | None = None) -> np.ndarray:
    reach = obtainable(net) if reach is None else reach
    degraded = (net.degradation_rates > 0).any(axis=0)
    leads_out = reach[:, degraded].any(axis=1)  # j has a path to some degradation
    return np.array([leads_out[reach[i]].all() for i in range(net.d)], dtype=bool)


@dataclass(frozen=True)
class SpeciesPartition:
    closed_components: tuple[tuple[int, ...], ...]
    produced: tuple[int, ...]
    transient: tuple[int, ...]

    @property
    def h(self) -> int:
        return len(self.closed_components)

    @property
    def representatives(self) -> tuple[int, ...]:
        return tuple(min(c) for c in self.closed_components)

    def block_of(self, i: int) -> str:
        for k, comp in enumerate(self.closed_components):
            if i in comp:
                return f"S{k + 1}"
        return "SP" if i in self.produced else "ST"

    def describe(self, names) -> list[tuple[str, str]]:
        rows = [(f"closed_{k + 1}", " ".join(names[i] for i in c)) for k, c in enumerate(self.closed_components)]
        rows.append(("produced", " ".join(names[i] for i in self.produced)))
        rows.append(("transient", " ".join(names[i] for i in self.transient)))
        return rows


def classify(net: ModulatedNetwork) -> SpeciesPartition:
    d = net.d
    reach = obtainable(net)
    prod = properly_produced(net, reach)
    adj = conversion_graph(net)
    degraded_here = (net.degradation_rates > 0).any(axis=0)
    _, labels = connected_components(csr_matrix(adj.astype(np.int8)), directed=True, connection="strong")
    closed = []
    for lab in np.unique(labels):
        members = np.flatnonzero(labels == lab)
        outside = np.setdiff1d(np.arange(d), members)
        if adj[np.ix_(members, outside)].any() or degraded_here[members].any() or prod[members].any():
            continue
        closed.append(tuple(int(i) for i in members))
    closed.sort(key=min)
    in_closed = {i for c in closed for i in c}
    produced = tuple(int(i) for i in np.flatnonzero(prod))
    transient = tuple(i for i in range(d) if i not in in_closed and not prod[i])
    return SpeciesPartition(tuple(closed), produced, transient)


@dataclass(frozen=True)
class ErgodicityVerdict:
    satisfied: bool
    violations: tuple[tuple[int, str], ...]
    mean_production: float
    partition: SpeciesPartition


def check_assumption2(net: ModulatedNetwork, pi=None) -> ErgodicityVerdict:
    reach = obtainable(net)
    prod = properly_produced(net, reach)
    deg = properly_degraded(net, reach)
    violations = tuple((int(i), NOT_DEGRADED) for i in np.flatnonzero(prod & ~deg))
    finite, value = mean_production_check(net, pi)
    return ErgodicityVerdict(not violations and finite, violations, value, classify(net))


# ----------------------------------------------------------------------------
# Monte Carlo alpha search


@dataclass(frozen=True)
class AlphaRow:
    alpha: int
    estimate: float
    ucb99: float
    min_entry: float  # mean of the smallest entry of Phi over degradable columns


@dataclass(frozen=True)
class AlphaEstimate:
    alpha: int | None
    anchor: int
    replicas: int
    table: tuple[AlphaRow, ...]
    note: str = ""
    degradable: tuple[int, ...] = field(default=())


def _alpha_block(net: ModulatedNetwork, x: int, alpha_max: int, cols: np.ndarray):
    def run(rng, start, stop):
        prop = Propagator(net)  # kernel caches are not shared across threads
        n = stop - start
        prod = np.broadcast_to(np.eye(net.d), (n, net.d, net.d)).copy()
        maxes = np.empty((alpha_max, n))
        mins = np.empty((alpha_max, n))
        for a in range(alpha_max):
            C = prop.cycle_blocks_batch(simulate_cycles(net.env, x, n, rng), with_d=False).C
            prod = C @ prod
            sums = prod[:, :, cols].sum(axis=1)
            maxes[a] = sums.max(axis=1)
            mins[a] = prod[:, :, cols].min(axis=(1, 2))
        return maxes, mins

    return run


def estimate_alpha(
    net: ModulatedNetwork,
    x: int,
    alpha_max: int = 5,
    replicas: int = 10_000,
    seed: int = DEFAULT_SEED,
    threads: int | None = None,
) -> AlphaEstimate:
    """Smallest ``alpha`` whose mean worst-case survival over ``alpha`` cycles is credibly below 1.

    Raises :class:`BudgetExhausted` when no ``alpha <= alpha_max`` passes.
    """
    net = ensure_multistate(net)
    cols = np.flatnonzero(properly_degraded(net))
    if not cols.size:
        row = AlphaRow(1, 0.0, 0.0, 0.0)
        return AlphaEstimate(1, x, 0, (row,), note="no properly degraded species; vacuous pass")
    parts = map_blocks(_alpha_block(net, x, alpha_max, cols), seed, replicas, threads=threads)
    maxes = np.concatenate([p[0] for p in parts], axis=1)
    mins = np.concatenate([p[1] for p in parts], axis=1)
    rows = []
    for a in range(alpha_max):
        m = float(maxes[a].mean())
        sd = float(maxes[a].std(ddof=1)) if replicas > 1 else 0.0
        ucb = float(m + UCB_Z * sd / np.sqrt(replicas))
        rows.append(AlphaRow(a + 1, m, ucb, float(mins[a].mean())))
        if m < 1.0 and ucb < 1.0:
            return AlphaEstimate(a + 1, x, replicas, tuple(rows), degradable=tuple(int(c) for c in cols))
    raise BudgetExhausted(f"no alpha <= {alpha_max} passed at anchor {x}", tuple(rows))
