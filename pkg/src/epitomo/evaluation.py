"""Error metrics and reference baselines for judging estimates.

Two kinds of comparison live here: scoring an estimate against known truth
(error_r for the rate ratio, error_l for the topology), and the two cheap
baselines the likelihood method is benchmarked against (sign-of-correlation
link prediction, and uniform random guessing).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .netgen import NeighborMatrix
from .simulate import INFECTIOUS_COUNTS, TimeSeriesDataset

__all__ = [
    "ErrorReport",
    "error_r",
    "error_l",
    "mismatched_pairs",
    "naive_correlation_estimate",
    "random_guess_stats",
]


def error_r(alpha_hat: float, beta_hat: float, alpha_true: float, beta_true: float) -> float:
    """Relative absolute deviation of the estimated rate ratio from the true one.

    |r_hat - r| / r with r = alpha/beta. Invariant under common rescaling of
    the estimated pair, since only the ratio enters.
    """
    if beta_hat <= 0 or beta_true <= 0:
        raise ValueError("beta values must be positive")
    if alpha_true <= 0:
        raise ValueError("true ratio must be nonzero")
    r_true = alpha_true / beta_true
    r_hat = alpha_hat / beta_hat
    return abs(r_hat - r_true) / r_true


def mismatched_pairs(l_hat: NeighborMatrix, l_true: NeighborMatrix) -> tuple[tuple[int, int], ...]:
    """Unordered pairs (i, j), i < j, whose link presence differs."""
    if l_hat.n != l_true.n:
        raise ValueError(f"topology sizes differ: {l_hat.n} vs {l_true.n}")
    iu = np.triu_indices(l_hat.n, k=1)
    wrong = l_hat.bits[iu] != l_true.bits[iu]
    return tuple(zip(iu[0][wrong].tolist(), iu[1][wrong].tolist()))


def error_l(l_hat: NeighborMatrix, l_true: NeighborMatrix) -> float:
    """Fraction of unordered node pairs whose link presence is wrong."""
    n = l_true.n
    wrong = mismatched_pairs(l_hat, l_true)
    return len(wrong) / (n * (n - 1) // 2)


@dataclass(frozen=True)
class ErrorReport:
    """Joint score of one (rates, topology) estimate against truth.

    e_l equals len(mismatches) divided by the unordered pair count exactly;
    both are integers before the division. e_r may be nan when the rate fit
    was flagged (estimated beta <= 0).
    """

    e_r: float
    e_l: float
    mismatches: tuple[tuple[int, int], ...]

    @classmethod
    def compare(
        cls,
        l_hat: NeighborMatrix,
        l_true: NeighborMatrix,
        alpha_hat: float,
        beta_hat: float,
        alpha_true: float,
        beta_true: float,
    ) -> "ErrorReport":
        wrong = mismatched_pairs(l_hat, l_true)
        n = l_true.n
        if beta_hat > 0:
            e_r = error_r(alpha_hat, beta_hat, alpha_true, beta_true)
        else:
            e_r = math.nan
        return cls(e_r=e_r, e_l=len(wrong) / (n * (n - 1) // 2), mismatches=wrong)


def naive_correlation_estimate(dataset: TimeSeriesDataset) -> NeighborMatrix:
    """Predict links from anti-correlated infection increments.

    For each pair (i, j) the score is the sum over intervals of the product
    of increments centered by the cross-node mean of that interval (the mean
    over nodes at fixed time, not over time). A link is predicted exactly
    when the score is negative; ties, including the zero diagonal, predict
    absence. The score is an unnormalized covariance; only its sign is used,
    so no denominator is needed.
    """
    if dataset.kind != INFECTIOUS_COUNTS:
        raise ValueError("correlation baseline needs an infectious-counts dataset")
    if dataset.n_obs < 3:
        raise ValueError("need at least 3 observations")
    deltas = np.diff(dataset.values, axis=0)
    centered = deltas - deltas.mean(axis=1, keepdims=True)
    rho = centered.T @ centered
    bits = (rho < 0).astype(np.int8)
    np.fill_diagonal(bits, 0)
    return NeighborMatrix(bits)


def random_guess_stats(n: int) -> tuple[float, float]:
    """Mean and standard deviation of e_l under uniform random link guessing.

    Each of the n(n-1)/2 pairs is wrong independently with probability 1/2,
    so e_l is binomial: mean 1/2, sd 0.5/sqrt(n(n-1)/2).
    """
    if n < 2:
        raise ValueError("need at least 2 nodes")
    pairs = n * (n - 1) // 2
    return 0.5, 0.5 / math.sqrt(pairs)
