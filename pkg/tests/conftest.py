"""Shared fixtures for desk-scale test configurations."""
from __future__ import annotations

import numpy as np
import pytest

from epitomo.netgen import NeighborMatrix, generate_er_topology, mobility_from_topology
from epitomo.simulate import TransmissionParams


@pytest.fixture
def params_r2() -> TransmissionParams:
    """The r=2 rate pair used throughout the synthetic benchmarks."""
    return TransmissionParams(alpha=0.067, beta=0.033, gamma_total=0.1)


@pytest.fixture
def ring4() -> NeighborMatrix:
    bits = np.zeros((4, 4), dtype=np.int8)
    for i in range(4):
        j = (i + 1) % 4
        bits[i, j] = bits[j, i] = 1
    return NeighborMatrix(bits)


@pytest.fixture
def er6():
    topo = generate_er_topology(6, 2.5, seed=3)
    return topo, mobility_from_topology(topo, 0.1)


def star_topology(n_leaves: int) -> NeighborMatrix:
    bits = np.zeros((n_leaves + 1, n_leaves + 1), dtype=np.int8)
    bits[0, 1:] = 1
    bits[1:, 0] = 1
    return NeighborMatrix(bits)
