"""Random meta-population networks and the mobility law defined on them.

A network is a binary, symmetric neighbor matrix with an empty diagonal.
From it we derive per-node degrees, the row-normalized mobility-rate matrix
(each occupied row sums to the total leaving rate), and the stationary
population allocation proportional to link attractiveness.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import stream

__all__ = [
    "NeighborMatrix",
    "MobilityMatrix",
    "PopulationAllocation",
    "generate_er_topology",
    "degrees",
    "mobility_from_topology",
    "initial_populations",
    "topology_to_edge_list",
    "topology_from_edge_list",
    "topology_to_json",
    "topology_from_json",
    "mobility_to_json",
    "mobility_from_json",
]


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class NeighborMatrix:
    """Binary symmetric adjacency with zero diagonal.

    bits[i, j] == 1 means nodes i and j are neighbors. Immutable after
    construction (the array is write-protected), so instances can be shared
    across worker processes freely.
    """

    bits: np.ndarray

    def __post_init__(self) -> None:
        bits = np.asarray(self.bits)
        if bits.ndim != 2 or bits.shape[0] != bits.shape[1]:
            raise ValueError(f"neighbor matrix must be square, got shape {bits.shape}")
        if not np.isin(bits, (0, 1)).all():
            raise ValueError("neighbor matrix entries must be 0 or 1")
        bits = bits.astype(np.int8)
        if np.diag(bits).any():
            raise ValueError("neighbor matrix has nonzero diagonal entries")
        if not np.array_equal(bits, bits.T):
            raise ValueError("neighbor matrix must be symmetric")
        object.__setattr__(self, "bits", _freeze(bits))

    @property
    def n(self) -> int:
        return self.bits.shape[0]

    @property
    def n_links(self) -> int:
        return int(self.bits.sum()) // 2

    def links(self) -> list[tuple[int, int]]:
        """Unordered link pairs (i, j) with i < j, row-major order."""
        iu = np.triu_indices(self.n, k=1)
        mask = self.bits[iu] == 1
        return list(zip(iu[0][mask].tolist(), iu[1][mask].tolist()))

    def canonical_bytes(self) -> bytes:
        """Stable encoding of the upper triangle, for dedup and hashing."""
        iu = np.triu_indices(self.n, k=1)
        return np.packbits(self.bits[iu]).tobytes()

    def with_flipped(self, i: int, j: int) -> "NeighborMatrix":
        """Copy with the (i, j) link toggled."""
        if i == j:
            raise ValueError("cannot flip a diagonal entry")
        bits = self.bits.copy()
        bits[i, j] = bits[j, i] = 1 - bits[i, j]
        return NeighborMatrix(bits)


@dataclass(frozen=True)
class MobilityMatrix:
    """Per-pair leaving rates gamma[i, j] (probability per unit time).

    Zero diagonal, nonnegative entries. Row i sums to the total leaving
    rate for node i (zero for an isolated node).
    """

    rates: np.ndarray

    def __post_init__(self) -> None:
        rates = np.asarray(self.rates, dtype=float)
        if rates.ndim != 2 or rates.shape[0] != rates.shape[1]:
            raise ValueError(f"mobility matrix must be square, got shape {rates.shape}")
        if np.diag(rates).any():
            raise ValueError("mobility matrix has nonzero diagonal entries")
        if (rates < 0).any():
            raise ValueError("mobility rates must be nonnegative")
        if not np.isfinite(rates).all():
            raise ValueError("mobility rates must be finite")
        object.__setattr__(self, "rates", _freeze(rates))

    @property
    def n(self) -> int:
        return self.rates.shape[0]

    def row_sums(self) -> np.ndarray:
        return self.rates.sum(axis=1)


@dataclass(frozen=True)
class PopulationAllocation:
    """Initial resident counts per node; counts sum to total."""

    counts: np.ndarray
    total: float = field(default=0.0)

    def __post_init__(self) -> None:
        counts = np.asarray(self.counts, dtype=float)
        if counts.ndim != 1:
            raise ValueError("population counts must be a vector")
        if (counts < 0).any():
            raise ValueError("population counts must be nonnegative")
        total = float(self.total) if self.total else float(counts.sum())
        if abs(counts.sum() - total) > 1e-6 * max(total, 1.0):
            raise ValueError("population counts do not sum to the stated total")
        object.__setattr__(self, "counts", _freeze(counts))
        object.__setattr__(self, "total", total)

    @property
    def n(self) -> int:
        return self.counts.shape[0]


def generate_er_topology(n: int, avg_degree: float, seed: int) -> NeighborMatrix:
    """Erdos-Renyi network with link probability avg_degree / (n - 1).

    One Bernoulli draw per unordered pair, in row-major (i < j) order, from
    the named stream (seed, "er"). Connectivity is NOT enforced; isolated
    nodes are legal and simply get an all-zero mobility row downstream.

    Args:
        n: number of nodes, at least 2.
        avg_degree: expected degree, in [0, n - 1].
        seed: base seed for the draw stream.
    """
    if n < 2:
        raise ValueError(f"need at least 2 nodes, got {n}")
    p = avg_degree / (n - 1)
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"avg_degree {avg_degree} outside [0, {n - 1}]")
    g = stream(seed, "er")
    n_pairs = n * (n - 1) // 2
    draws = g.random(n_pairs) < p
    bits = np.zeros((n, n), dtype=np.int8)
    iu = np.triu_indices(n, k=1)
    bits[iu] = draws
    bits |= bits.T
    return NeighborMatrix(bits)


def degrees(topology: NeighborMatrix) -> np.ndarray:
    """Per-node link counts k_i."""
    return topology.bits.sum(axis=1).astype(np.int64)


def _attractiveness(topology: NeighborMatrix, exponent: float) -> np.ndarray:
    """Row matrix w[i, j] = l_ij * (k_i k_j)**exponent."""
    k = degrees(topology).astype(float)
    ke = np.power(k, exponent)
    return topology.bits * np.outer(ke, ke)


def mobility_from_topology(topology: NeighborMatrix, gamma_total: float) -> MobilityMatrix:
    """Mobility law: gamma[i, j] = l_ij sqrt(k_i k_j) / sum_j l_ij sqrt(k_i k_j) * gamma_total.

    Rows of occupied nodes sum to gamma_total; an isolated node yields an
    all-zero row, not an error.
    """
    if gamma_total < 0:
        raise ValueError("gamma_total must be nonnegative")
    w = _attractiveness(topology, 0.5)
    row = w.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        rates = np.where(row > 0, w / np.where(row > 0, row, 1.0) * gamma_total, 0.0)
    return MobilityMatrix(rates)


def initial_populations(
    topology: NeighborMatrix,
    total_population: float | None = None,
    exponent: float = 0.5,
) -> PopulationAllocation:
    """Allocate residents proportionally to summed link attractiveness.

    P_i = sum_j l_ij (k_i k_j)**exponent, normalized to total_population
    (default 1e6 per node). The default exponent 1/2 matches the mobility
    law; larger exponents concentrate population on hubs.

    Raises ValueError when the network has no links at all (the allocation
    weight would be identically zero).
    """
    if total_population is None:
        total_population = 1e6 * topology.n
    if total_population <= 0:
        raise ValueError("total_population must be positive")
    w = _attractiveness(topology, exponent).sum(axis=1)
    total_w = w.sum()
    if total_w == 0:
        raise ValueError("cannot allocate population on a network with no links")
    counts = w / total_w * total_population
    return PopulationAllocation(counts, total_population)


# ---------------------------------------------------------------------------
# serialization: plain-text edge list and JSON
# ---------------------------------------------------------------------------


def topology_to_edge_list(topology: NeighborMatrix) -> str:
    """One '<i> <j>' line per link, 0-based, i < j, row-major order."""
    return "".join(f"{i} {j}\n" for i, j in topology.links())


def topology_from_edge_list(text: str, n: int) -> NeighborMatrix:
    """Parse the edge-list format produced by topology_to_edge_list."""
    bits = np.zeros((n, n), dtype=np.int8)
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"line {lineno}: expected 'i j', got {line!r}")
        i, j = (int(p) for p in parts)
        if i == j:
            raise ValueError(f"line {lineno}: self-link {i}")
        if not (0 <= i < n and 0 <= j < n):
            raise ValueError(f"line {lineno}: node index out of range for n={n}")
        bits[i, j] = bits[j, i] = 1
    return NeighborMatrix(bits)


def topology_to_json(topology: NeighborMatrix) -> str:
    return json.dumps({"n": topology.n, "links": [list(l) for l in topology.links()]})


def topology_from_json(text: str) -> NeighborMatrix:
    doc = json.loads(text)
    bits = np.zeros((doc["n"], doc["n"]), dtype=np.int8)
    for i, j in doc["links"]:
        if i == j:
            raise ValueError(f"self-link {i} in JSON topology")
        bits[i, j] = bits[j, i] = 1
    return NeighborMatrix(bits)


def mobility_to_json(topology: NeighborMatrix, gamma_total: float) -> str:
    """JSON form of a law-derived mobility: carries n, links, gamma."""
    doc = json.loads(topology_to_json(topology))
    doc["gamma"] = gamma_total
    return json.dumps(doc)


def mobility_from_json(text: str) -> MobilityMatrix:
    doc = json.loads(text)
    topology = topology_from_json(json.dumps({"n": doc["n"], "links": doc["links"]}))
    return mobility_from_topology(topology, doc["gamma"])


def save_text(text: str, path: str | Path) -> None:
    Path(path).write_text(text)


def load_text(path: str | Path) -> str:
    return Path(path).read_text()
