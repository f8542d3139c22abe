"""Parameter and topology estimators.

The inverse problem splits in two: transmission rates first, topology
second.  Rates come from closed-form stationary-point formulas on the
network-wide totals (or from a three-parameter fit when only cumulative
case counts exist).  The topology is then searched by simulated
annealing over binary neighbor matrices with the rates held fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .likelihood import loglik_I1, loglik_J2
from .netgen import NeighborMatrix, mobility_from_topology
from .rng import spawn_trial_seeds, stream
from .simulate import INFECTIOUS_COUNTS, NEW_CASES, TimeSeriesDataset, TransmissionParams

__all__ = [
    "AnnealingSchedule",
    "GAMMA_SEARCH_GRID",
    "ParamEstimate",
    "TopologyEstimate",
    "TopologyRank",
    "convert_dJ_to_I",
    "estimate_alpha_beta",
    "estimate_from_J_totals",
    "multi_trial_topology_ranking",
    "rank_topology_estimates",
    "sa_topology_search",
]

# Candidate total-outflow values when the mobility scale itself is
# unknown and searched jointly with the topology.
GAMMA_SEARCH_GRID = (0.025, 0.05, 0.1, 0.2, 0.4)

# In joint search mode, every tenth step proposes a move on the
# outflow grid instead of a link flip.
_GAMMA_MOVE_PERIOD = 10


@dataclass(frozen=True)
class AnnealingSchedule:
    """Cooling schedule and proposal rule for the topology search.

    ``k`` rescales log-likelihood differences to the temperature's
    units.  When ``None`` it is calibrated at search time from the
    spread of the objective over random topologies.
    """

    steps: int
    k: float | None = None
    proposal: str = "single-pair-flip"

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.k is not None and self.k <= 0:
            raise ValueError("k must be positive")
        if self.proposal != "single-pair-flip":
            raise ValueError(f"unknown proposal rule {self.proposal!r}")

    def temperature(self, s: int) -> float:
        """Logarithmic cooling, shifted to be finite at step 0."""
        return 1.0 / math.log(s + 2.0)

    @classmethod
    def for_network_size(cls, n: int, k: float | None = None) -> "AnnealingSchedule":
        """Default step budget, scaled with the squared node count."""
        return cls(steps=200 * n * n, k=k)


@dataclass(frozen=True)
class ParamEstimate:
    """Estimated transmission rates and their ratio.

    ``r_hat`` is NaN when ``beta_hat`` is nonpositive; such estimates
    carry ``flagged=True``.
    """

    alpha_hat: float
    beta_hat: float
    r_hat: float
    i0_hat: float | None = None
    flagged: bool = False

    @classmethod
    def from_rates(
        cls,
        alpha_hat: float,
        beta_hat: float,
        i0_hat: float | None = None,
        flagged: bool = False,
    ) -> "ParamEstimate":
        if beta_hat > 0:
            r_hat = alpha_hat / beta_hat
        else:
            r_hat = math.nan
            flagged = True
        return cls(
            alpha_hat=alpha_hat,
            beta_hat=beta_hat,
            r_hat=r_hat,
            i0_hat=i0_hat,
            flagged=flagged,
        )


@dataclass(frozen=True)
class TopologyEstimate:
    """Best topology found by one annealing run.

    ``loglik`` is re-evaluated from scratch on the returned topology
    after the search, so it is reproducible independently of the
    search path.  ``gamma_total`` is the outflow value the likelihood
    was evaluated at (the searched value in joint mode).
    """

    l_hat: NeighborMatrix
    loglik: float
    trial_id: int
    converged_step: int
    gamma_total: float


@dataclass(frozen=True)
class TopologyRank:
    """One entry of a multi-trial ranking."""

    estimate: TopologyEstimate
    multiplicity: int
    trial_ids: tuple[int, ...]


def estimate_alpha_beta(totals: np.ndarray, delta_t: float) -> ParamEstimate:
    """Closed-form rate estimators from network-wide infectious totals.

    With increments dT_d = T(t_{d+1}) - T(t_d) over the D - 1 available
    transitions, the stationary point of the aggregate likelihood is

        u = sum(dT) / sum(T)
        w = [sum(dT^2 / T) - sum(dT)^2 / sum(T)] / (D - 1)
        alpha_hat = (w + u) / (2 dt),  beta_hat = (w - u) / (2 dt)

    where every sum runs over the predecessor observations
    T(t_0) .. T(t_{D-2}).  A nonpositive ``beta_hat`` is reported as
    the formula yields it, flagged, with ``r_hat`` NaN.
    """
    totals = np.asarray(totals, dtype=float)
    if totals.ndim != 1 or totals.size < 3:
        raise ValueError("totals must be a 1-d array with D >= 3")
    delta_t = float(delta_t)
    if delta_t <= 0.0:
        raise ValueError("delta_t must be positive")
    pred = totals[:-1]
    zeros = np.nonzero(pred == 0.0)[0]
    if zeros.size:
        raise ValueError(
            f"zero totals at observation(s) {list(int(d) for d in zeros)} "
            "appear in a ratio term"
        )
    inc = np.diff(totals)
    n_inc = inc.size
    u = math.fsum(inc) / math.fsum(pred)
    w = (math.fsum(inc * inc / pred) - math.fsum(inc) ** 2 / math.fsum(pred)) / n_inc
    alpha_hat = (w + u) / (2.0 * delta_t)
    beta_hat = (w - u) / (2.0 * delta_t)
    return ParamEstimate.from_rates(alpha_hat, beta_hat)


def convert_dJ_to_I(
    dataset: TimeSeriesDataset, alpha_hat: float, delta_t: float | None = None
) -> TimeSeriesDataset:
    """Turn per-node new-case counts into an infectious-count series.

    New cases over one interval are approximately alpha * I * dt, so
    I_i(t_d) = dJ_i(t_d) / (alpha_hat * dt) elementwise.  Zeros map to
    zeros.
    """
    if dataset.kind != NEW_CASES:
        raise ValueError("dataset must hold new-case counts")
    if not (alpha_hat > 0.0 and math.isfinite(alpha_hat)):
        raise ValueError("alpha_hat must be positive")
    if delta_t is None:
        delta_t = dataset.delta_t
    elif delta_t != dataset.delta_t:
        raise ValueError("delta_t does not match the dataset")
    values = dataset.values / (alpha_hat * delta_t)
    return TimeSeriesDataset(
        kind=INFECTIOUS_COUNTS,
        delta_t=dataset.delta_t,
        values=values,
        meta=dict(dataset.meta) if dataset.meta else None,
    )


class _TopologyObjective:
    """Search objective: likelihood of a topology at fixed rates.

    The exact-mode likelihood keeps candidates comparable: observations
    a candidate's mobility graph cannot reach are charged the
    deterministic-limit penalty inside loglik_I1 itself, so the value
    is a sum over the same intervals for every candidate.  Results are
    memoized on the packed link encoding (plus the outflow value in
    joint-search mode) because the annealing chain revisits topologies
    constantly.
    """

    def __init__(
        self,
        values: np.ndarray,
        delta_t: float,
        alpha_hat: float,
        beta_hat: float,
    ) -> None:
        self.values = values
        self.delta_t = delta_t
        self.params = TransmissionParams(alpha_hat, beta_hat)
        self.cache: dict[tuple[bytes, float], float] = {}

    def __call__(self, topology: NeighborMatrix, gamma_total: float) -> float:
        key = (topology.canonical_bytes(), gamma_total)
        hit = self.cache.get(key)
        if hit is not None:
            return hit
        mobility = mobility_from_topology(topology, gamma_total)
        res = loglik_I1(self.values, self.delta_t, self.params, mobility, mode="exact")
        value = res.value
        self.cache[key] = value
        return value


def _random_topology(n: int, rng: np.random.Generator) -> NeighborMatrix:
    """Uniform draw over all binary symmetric zero-diagonal matrices."""
    bits = np.zeros((n, n), dtype=np.int8)
    iu = np.triu_indices(n, k=1)
    draws = (rng.random(iu[0].size) < 0.5).astype(np.int8)
    bits[iu] = draws
    bits[(iu[1], iu[0])] = draws
    return NeighborMatrix(bits)


def _calibrate_k(
    objective: _TopologyObjective,
    n: int,
    gamma_total: float,
    rng: np.random.Generator,
    n_probe: int = 100,
) -> float:
    """Likelihood scale: spread of L over uniformly random topologies.

    Uses the median absolute deviation rather than the standard
    deviation: a random candidate occasionally disconnects the graph
    and draws a deterministic-limit penalty orders of magnitude below
    every ordinary value, and a plain standard deviation inflated by
    those outliers would make the chain accept nearly every downhill
    move.  The robust scale tracks the spread of the ordinary
    candidates, which is the scale the acceptance rule needs.
    """
    probes = np.array(
        [objective(_random_topology(n, rng), gamma_total) for _ in range(n_probe)]
    )
    mad = float(np.median(np.abs(probes - np.median(probes))))
    k = 1.4826 * mad
    if k <= 0.0 or not math.isfinite(k):
        raise ValueError(
            "adaptive likelihood scale k is not positive; "
            "the objective is flat over random topologies"
        )
    return k


def sa_topology_search(
    dataset: TimeSeriesDataset,
    alpha_hat: float,
    beta_hat: float,
    schedule: AnnealingSchedule,
    seed: int = 0,
    gamma_total_mode: str = "known",
    gamma_total: float | None = None,
    trial_id: int = 0,
    debug: bool = False,
) -> TopologyEstimate:
    """Simulated-annealing search for the neighbor matrix.

    Maximizes the per-node likelihood at fixed rates over binary
    topologies.  A proposal flips one uniformly random unordered pair;
    it is accepted with probability min(1, exp((L' - L)/(k T(s)))) at
    temperature T(s) = 1/log(s + 2).  The best topology ever visited is
    returned, with its log-likelihood re-evaluated from scratch.

    ``gamma_total_mode="known"`` requires ``gamma_total`` and holds it
    fixed.  ``"search"`` treats the total outflow as unknown: every
    tenth step proposes a move on a log-spaced grid instead of a link
    flip, and the returned estimate carries the best grid value.
    """
    if dataset.kind != INFECTIOUS_COUNTS:
        raise ValueError("dataset must hold infectious counts")
    if gamma_total_mode not in ("known", "search"):
        raise ValueError(f"unknown gamma_total_mode {gamma_total_mode!r}")
    if gamma_total_mode == "known":
        if gamma_total is None:
            raise ValueError("gamma_total is required when gamma_total_mode='known'")
        gamma = float(gamma_total)
        if gamma < 0.0:
            raise ValueError("gamma_total must be nonnegative")
    else:
        # Start from the supplied value snapped to the grid, or the
        # grid midpoint.
        if gamma_total is None:
            gamma = GAMMA_SEARCH_GRID[len(GAMMA_SEARCH_GRID) // 2]
        else:
            gamma = min(GAMMA_SEARCH_GRID, key=lambda g: abs(g - gamma_total))

    n = dataset.n
    rng = stream(seed, "sa", trial_id)
    objective = _TopologyObjective(dataset.values, dataset.delta_t, alpha_hat, beta_hat)

    k = schedule.k
    if k is None:
        k = _calibrate_k(objective, n, gamma, rng)

    current = _random_topology(n, rng)
    current_gamma = gamma
    current_l = objective(current, current_gamma)
    best, best_gamma, best_l, best_step = current, current_gamma, current_l, 0

    n_pairs = n * (n - 1) // 2
    if n_pairs == 0:
        raise ValueError("need at least 2 nodes to search topologies")

    for s in range(schedule.steps):
        gamma_move = (
            gamma_total_mode == "search" and s % _GAMMA_MOVE_PERIOD == _GAMMA_MOVE_PERIOD - 1
        )
        if gamma_move:
            options = [g for g in GAMMA_SEARCH_GRID if g != current_gamma]
            prop_gamma = options[rng.integers(len(options))]
            prop = current
        else:
            flat = int(rng.integers(n_pairs))
            # row-major unordered pair index -> (i, j), i < j
            i = 0
            remaining = flat
            while remaining >= n - 1 - i:
                remaining -= n - 1 - i
                i += 1
            j = i + 1 + remaining
            prop = current.with_flipped(i, j)
            prop_gamma = current_gamma
        prop_l = objective(prop, prop_gamma)
        d_l = prop_l - current_l
        u = rng.random()
        if d_l >= 0.0:
            accept = True
        else:
            accept = u < math.exp(d_l / (k * schedule.temperature(s)))
        if debug and d_l >= 0.0:
            assert accept, "improving proposal must always be accepted"
        if accept:
            current, current_gamma, current_l = prop, prop_gamma, prop_l
            if current_l > best_l:
                best, best_gamma, best_l, best_step = (
                    current,
                    current_gamma,
                    current_l,
                    s + 1,
                )

    # Audit: recompute the reported value outside the cache.
    mobility = mobility_from_topology(best, best_gamma)
    audited = loglik_I1(
        dataset.values, dataset.delta_t, objective.params, mobility, mode="exact"
    ).value
    return TopologyEstimate(
        l_hat=best,
        loglik=audited,
        trial_id=trial_id,
        converged_step=best_step,
        gamma_total=best_gamma,
    )


def _j_fit_objective(totals_j: np.ndarray, delta_t: float):
    def f(log_theta: np.ndarray) -> float:
        alpha, beta, i0 = np.exp(log_theta)
        return loglik_J2(totals_j, delta_t, float(alpha), float(beta), float(i0)).value

    return f


def _j_fit_starts(
    totals_j: np.ndarray, rng: np.random.Generator, count: int
) -> np.ndarray:
    """Random initial points in log-parameter space."""
    i0_hint = max(float(totals_j[0]), 1.0)
    log_alpha = rng.uniform(math.log(0.01), math.log(1.0), size=count)
    log_beta = rng.uniform(math.log(0.01), math.log(1.0), size=count)
    log_i0 = rng.uniform(
        math.log(0.2 * i0_hint), math.log(5.0 * i0_hint), size=count
    )
    return np.column_stack([log_alpha, log_beta, log_i0])


def estimate_from_J_totals(
    totals_j: np.ndarray,
    delta_t: float,
    method: str = "quasi-newton",
    seed: int = 0,
    steps: int = 30000,
    n_starts: int = 20,
) -> ParamEstimate:
    """Fit (alpha, beta, I0) to network-wide cumulative case totals.

    Maximizes the cumulative-count likelihood in log-parameter space.
    ``method="quasi-newton"`` runs multi-start L-BFGS-B with numerical
    gradients; ``"anneal"`` runs simulated annealing with Gaussian
    proposals whose width shrinks over the budget.  The quasi-Newton
    route flags the estimate when no start converges.
    """
    totals_j = np.asarray(totals_j, dtype=float)
    if totals_j.ndim != 1 or totals_j.size < 4:
        raise ValueError("totals_j must be a 1-d array with at least 4 entries")
    if np.any(np.diff(totals_j) < 0.0):
        raise ValueError("cumulative totals must be nondecreasing")
    delta_t = float(delta_t)
    if delta_t <= 0.0:
        raise ValueError("delta_t must be positive")
    if method not in ("quasi-newton", "anneal"):
        raise ValueError(f"unknown method {method!r}")

    f = _j_fit_objective(totals_j, delta_t)

    def neg(x: np.ndarray) -> float:
        v = f(x)
        # Diverging-moment regions evaluate to -inf; hand the
        # minimizer a large finite penalty instead.
        return -v if math.isfinite(v) else 1e12

    if method == "quasi-newton":
        rng = stream(seed, "j-fit")
        starts = _j_fit_starts(totals_j, rng, n_starts)
        i0_cap = math.log(max(10.0 * float(totals_j[-1]), 10.0))
        bounds = [
            (math.log(1e-4), math.log(10.0)),
            (math.log(1e-4), math.log(10.0)),
            (math.log(1e-3), i0_cap),
        ]
        best_x, best_val, any_success = None, -math.inf, False
        for x0 in starts:
            res = minimize(neg, x0, method="L-BFGS-B", bounds=bounds)
            any_success = any_success or bool(res.success)
            if -res.fun > best_val:
                best_val, best_x = -res.fun, res.x
        alpha, beta, i0 = np.exp(best_x)
        return ParamEstimate.from_rates(
            float(alpha), float(beta), i0_hat=float(i0), flagged=not any_success
        )

    rng = stream(seed, "j-anneal")
    probes = _j_fit_starts(totals_j, rng, 100)
    probe_vals = np.array([f(x) for x in probes])
    finite = np.isfinite(probe_vals)
    if finite.sum() < 2:
        raise ValueError("likelihood is degenerate over the probe region")
    # Unlike the combinatorial topology search, this chain refines a
    # smooth three-parameter surface from the best random start, so the
    # acceptance scale is tied to likelihood-ratio units: late in the
    # schedule only sub-log-unit worsenings survive, which is what a
    # continuous polish needs.
    k = 2.0
    order = int(np.argmax(np.where(finite, probe_vals, -np.inf)))
    current = probes[order].copy()
    current_l = float(probe_vals[order])
    best, best_l = current.copy(), current_l
    # Proposal width decays geometrically from coarse to fine.
    sd0, sd1 = 0.3, 0.005
    for s in range(steps):
        sd = sd0 * (sd1 / sd0) ** (s / max(steps - 1, 1))
        prop = current + rng.normal(0.0, sd, size=3)
        prop_l = f(prop)
        d_l = prop_l - current_l
        u = rng.random()
        if d_l >= 0.0:
            accept = True
        else:
            t_s = 1.0 / math.log(s + 2.0)
            accept = u < math.exp(d_l / (k * t_s))
        if accept:
            current, current_l = prop, prop_l
            if current_l > best_l:
                best, best_l = current.copy(), current_l
    alpha, beta, i0 = np.exp(best)
    return ParamEstimate.from_rates(float(alpha), float(beta), i0_hat=float(i0))


def multi_trial_topology_ranking(
    dataset: TimeSeriesDataset,
    alpha_hat: float,
    beta_hat: float,
    trials: int,
    schedule: AnnealingSchedule,
    seed: int = 0,
    gamma_total_mode: str = "known",
    gamma_total: float | None = None,
) -> list[TopologyRank]:
    """Independent annealing runs, deduplicated and ranked.

    Each trial uses its own random stream.  Results are grouped by
    topology; each group reports how many trials converged to it and
    is represented by its best estimate.  Ranking is by log-likelihood
    descending with the packed link encoding as a deterministic
    tie-break.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    trial_seeds = spawn_trial_seeds(seed, trials)
    estimates = [
        sa_topology_search(
            dataset,
            alpha_hat,
            beta_hat,
            schedule,
            seed=trial_seed,
            gamma_total_mode=gamma_total_mode,
            gamma_total=gamma_total,
            trial_id=t,
        )
        for t, trial_seed in enumerate(trial_seeds)
    ]
    return rank_topology_estimates(estimates)


def rank_topology_estimates(estimates: list[TopologyEstimate]) -> list[TopologyRank]:
    """Group per-trial estimates by topology and rank the groups.

    Each distinct topology is represented by its best-scoring member;
    ranking is by log-likelihood descending, packed link encoding as a
    deterministic tie-break.
    """
    groups: dict[bytes, list[TopologyEstimate]] = {}
    for est in estimates:
        groups.setdefault(est.l_hat.canonical_bytes(), []).append(est)
    ranking = []
    for members in groups.values():
        rep = max(members, key=lambda e: e.loglik)
        ranking.append(
            TopologyRank(
                estimate=rep,
                multiplicity=len(members),
                trial_ids=tuple(sorted(e.trial_id for e in members)),
            )
        )
    ranking.sort(key=lambda r: (-r.estimate.loglik, r.estimate.l_hat.canonical_bytes()))
    return ranking
