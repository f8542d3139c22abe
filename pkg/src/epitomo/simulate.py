"""Stochastic outbreak simulation on a meta-population network.

Both simulators integrate Langevin dynamics with an explicit Euler-Maruyama
scheme: every elementary event channel (infection per node, recovery per
node, movement per directed link) contributes its drift rate times dt plus
sqrt(rate * dt) times an independent standard normal per step. The full
model tracks S, I, R and the cumulative case count J; the linearized model
drops the S-depletion factor (valid while I << S) and tracks I and J only.

Conventions:
  - J(0) = I(0): initial infections count as cases.
  - After each step S, I, R are clamped at zero. J is NOT clamped per step;
    it is the raw Gaussian-approximation case integral, so its increments
    can dip slightly negative at small counts (the price of matching the
    moment formulas exactly). Nonnegativity of reported case counts is
    enforced at the observation boundary instead, where increments span a
    full reporting interval and clamping is statistically negligible.
  - One standard-normal matrix is drawn per step with a fixed column
    layout (infection, recovery, then movement blocks in row-major link
    order; the full model orders movement blocks S, I, R), which pins down
    bit-exact reproducibility for a given seed.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .netgen import MobilityMatrix, PopulationAllocation, _freeze
from .rng import stream

__all__ = [
    "TransmissionParams",
    "CompartmentState",
    "Trajectory",
    "TimeSeriesDataset",
    "INFECTIOUS_COUNTS",
    "NEW_CASES",
    "simulate_full_sir",
    "simulate_linearized",
    "linearized_ensemble",
    "full_sir_ensemble",
    "observe",
]

INFECTIOUS_COUNTS = "infectious-counts"
NEW_CASES = "new-cases"


@dataclass(frozen=True)
class TransmissionParams:
    """Infection rate alpha, recovery rate beta, total leaving rate gamma_total."""

    alpha: float
    beta: float
    gamma_total: float = 0.0

    def __post_init__(self) -> None:
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError(f"alpha and beta must be positive, got ({self.alpha}, {self.beta})")
        if not 0.0 <= self.gamma_total <= 1.0:
            raise ValueError("gamma_total must lie in [0, 1]")

    @property
    def r(self) -> float:
        return self.alpha / self.beta

    @classmethod
    def from_ratio(cls, r: float, rate_sum: float = 0.1, gamma_total: float = 0.0) -> "TransmissionParams":
        """Split a fixed alpha + beta = rate_sum budget at ratio r = alpha / beta."""
        if r <= 0:
            raise ValueError("ratio must be positive")
        return cls(alpha=r / (1.0 + r) * rate_sum, beta=rate_sum / (1.0 + r), gamma_total=gamma_total)


@dataclass(frozen=True)
class CompartmentState:
    """Snapshot at time t. S and R are None for the linearized model."""

    t: float
    I: np.ndarray
    J: np.ndarray
    S: np.ndarray | None = None
    R: np.ndarray | None = None


class Trajectory:
    """Array-backed, time-ordered record of one simulated realization."""

    def __init__(
        self,
        model: str,
        dt_int: float,
        times: np.ndarray,
        I: np.ndarray,
        J: np.ndarray,
        S: np.ndarray | None = None,
        R: np.ndarray | None = None,
    ):
        self.model = model
        self.dt_int = float(dt_int)
        self.times = _freeze(np.asarray(times, dtype=float))
        self.I = _freeze(np.asarray(I, dtype=float))
        self.J = _freeze(np.asarray(J, dtype=float))
        self.S = _freeze(np.asarray(S, dtype=float)) if S is not None else None
        self.R = _freeze(np.asarray(R, dtype=float)) if R is not None else None

    @property
    def n(self) -> int:
        return self.I.shape[1]

    @property
    def duration(self) -> float:
        return float(self.times[-1])

    def __len__(self) -> int:
        return self.times.shape[0]

    def state(self, k: int) -> CompartmentState:
        return CompartmentState(
            t=float(self.times[k]),
            I=self.I[k],
            J=self.J[k],
            S=self.S[k] if self.S is not None else None,
            R=self.R[k] if self.R is not None else None,
        )


# ---------------------------------------------------------------------------
# integration engine
# ---------------------------------------------------------------------------


def _link_arrays(mobility: MobilityMatrix) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Directed links with positive rate, row-major order: (src, dst, rate)."""
    src, dst = np.nonzero(mobility.rates > 0)
    return src, dst, mobility.rates[src, dst]


def _scatter_matrices(n: int, src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Link-to-node accumulation matrices, shape (n_links, n)."""
    n_links = src.shape[0]
    m_out = np.zeros((n_links, n))
    m_in = np.zeros((n_links, n))
    m_out[np.arange(n_links), src] = 1.0
    m_in[np.arange(n_links), dst] = 1.0
    return m_out, m_in


def _check_grid(t_end: float, dt_int: float) -> int:
    if dt_int <= 0:
        raise ValueError("dt_int must be positive")
    steps = round(t_end / dt_int)
    if steps < 1 or abs(steps * dt_int - t_end) > 1e-9 * max(t_end, 1.0):
        raise ValueError(f"t_end {t_end} is not a positive multiple of dt_int {dt_int}")
    return steps


def _check_rates(mobility: MobilityMatrix, dt_int: float) -> None:
    worst = float(mobility.row_sums().max(initial=0.0))
    if worst * dt_int > 1.0:
        raise ValueError(
            f"leaving probability per step exceeds 1 (max row sum {worst} * dt_int {dt_int}); "
            "reduce dt_int or the rates"
        )


def _record_indices(steps: int, record_every: int) -> np.ndarray:
    if steps % record_every:
        raise ValueError("record_every must divide the step count")
    return np.arange(0, steps + 1, record_every)


def _flux(expected: np.ndarray, z: np.ndarray | None) -> np.ndarray:
    """Per-step channel flux: drift plus sqrt(drift) noise (expected = rate * dt)."""
    if z is None:
        return expected
    return expected + np.sqrt(expected) * z


def _run_linearized(
    mobility: MobilityMatrix,
    params: TransmissionParams,
    I0: np.ndarray,
    t_end: float,
    dt_int: float,
    g: np.random.Generator | None,
    paths: int,
    record_idx: np.ndarray,
    track_negatives: bool = False,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Shared engine. Returns (I_rec, J_rec, negative_events) with the
    recorded arrays shaped (len(record_idx), paths, n)."""
    n = mobility.n
    steps = _check_grid(t_end, dt_int)
    _check_rates(mobility, dt_int)
    src, dst, rate = _link_arrays(mobility)
    m_out, m_in = _scatter_matrices(n, src, dst)
    n_links = src.shape[0]

    I = np.broadcast_to(np.asarray(I0, dtype=float), (paths, n)).copy()
    if (I < 0).any():
        raise ValueError("initial infected counts must be nonnegative")
    J = I.copy()
    rec_at = {int(k): pos for pos, k in enumerate(record_idx)}
    I_rec = np.empty((len(record_idx), paths, n))
    J_rec = np.empty_like(I_rec)
    if 0 in rec_at:
        I_rec[rec_at[0]] = I
        J_rec[rec_at[0]] = J
    negative_events = 0

    for k in range(1, steps + 1):
        z = g.standard_normal((paths, 2 * n + n_links)) if g is not None else None
        inf = _flux(params.alpha * I * dt_int, z[:, :n] if z is not None else None)
        rec = _flux(params.beta * I * dt_int, z[:, n : 2 * n] if z is not None else None)
        mov = _flux(rate * I[:, src] * dt_int, z[:, 2 * n :] if z is not None else None)
        I = I + inf - rec + mov @ m_in - mov @ m_out
        J = J + inf
        if track_negatives:
            negative_events += int((I < 0).sum())
        np.maximum(I, 0.0, out=I)
        if k in rec_at:
            I_rec[rec_at[k]] = I
            J_rec[rec_at[k]] = J
    return I_rec, J_rec, negative_events


def _run_full(
    mobility: MobilityMatrix,
    params: TransmissionParams,
    populations: PopulationAllocation,
    I0: np.ndarray,
    t_end: float,
    dt_int: float,
    g: np.random.Generator | None,
    paths: int,
    record_idx: np.ndarray,
) -> tuple[np.ndarray, ...]:
    n = mobility.n
    steps = _check_grid(t_end, dt_int)
    _check_rates(mobility, dt_int)
    src, dst, rate = _link_arrays(mobility)
    m_out, m_in = _scatter_matrices(n, src, dst)
    n_links = src.shape[0]

    I = np.broadcast_to(np.asarray(I0, dtype=float), (paths, n)).copy()
    if (I < 0).any():
        raise ValueError("initial infected counts must be nonnegative")
    S = np.broadcast_to(populations.counts, (paths, n)) - I
    if (S < 0).any():
        raise ValueError("initial infected counts exceed node populations")
    S = S.copy()
    R = np.zeros((paths, n))
    J = I.copy()

    rec_at = {int(k): pos for pos, k in enumerate(record_idx)}
    out = tuple(np.empty((len(record_idx), paths, n)) for _ in range(4))
    S_rec, I_rec, R_rec, J_rec = out
    if 0 in rec_at:
        S_rec[rec_at[0]], I_rec[rec_at[0]], R_rec[rec_at[0]], J_rec[rec_at[0]] = S, I, R, J

    for k in range(1, steps + 1):
        z = g.standard_normal((paths, 2 * n + 3 * n_links)) if g is not None else None
        pop = S + I + R
        with np.errstate(invalid="ignore", divide="ignore"):
            inf_rate = np.where(pop > 0, params.alpha * S * I / np.where(pop > 0, pop, 1.0), 0.0)
        inf = _flux(inf_rate * dt_int, z[:, :n] if z is not None else None)
        rec = _flux(params.beta * I * dt_int, z[:, n : 2 * n] if z is not None else None)
        cols = [None, None, None]
        if z is not None:
            for b in range(3):
                cols[b] = z[:, 2 * n + b * n_links : 2 * n + (b + 1) * n_links]
        mov_s = _flux(rate * S[:, src] * dt_int, cols[0])
        mov_i = _flux(rate * I[:, src] * dt_int, cols[1])
        mov_r = _flux(rate * R[:, src] * dt_int, cols[2])
        S = S - inf + mov_s @ m_in - mov_s @ m_out
        I = I + inf - rec + mov_i @ m_in - mov_i @ m_out
        R = R + rec + mov_r @ m_in - mov_r @ m_out
        J = J + inf
        np.maximum(S, 0.0, out=S)
        np.maximum(I, 0.0, out=I)
        np.maximum(R, 0.0, out=R)
        if k in rec_at:
            S_rec[rec_at[k]], I_rec[rec_at[k]], R_rec[rec_at[k]], J_rec[rec_at[k]] = S, I, R, J
    return S_rec, I_rec, R_rec, J_rec


# ---------------------------------------------------------------------------
# public simulators
# ---------------------------------------------------------------------------


def simulate_linearized(
    mobility: MobilityMatrix,
    params: TransmissionParams,
    I0: np.ndarray,
    t_end: float,
    dt_int: float = 0.01,
    seed: int = 0,
    with_noise: bool = True,
) -> Trajectory:
    """One realization of the early-growth (linear-drift) model.

    Infection drift is alpha * I_i, so susceptible depletion is ignored; use
    only while case counts are far below node populations. Every step is
    recorded. Deterministic given (seed, dt_int); with_noise=False zeroes
    every noise term and integrates the plain moment ODE drift.
    """
    g = stream(seed, "sim-linear") if with_noise else None
    steps = _check_grid(t_end, dt_int)
    record_idx = _record_indices(steps, 1)
    I_rec, J_rec, _ = _run_linearized(mobility, params, I0, t_end, dt_int, g, 1, record_idx)
    times = record_idx * dt_int
    return Trajectory("linearized", dt_int, times, I_rec[:, 0, :], J_rec[:, 0, :])


def simulate_full_sir(
    mobility: MobilityMatrix,
    params: TransmissionParams,
    populations: PopulationAllocation,
    I0: np.ndarray,
    t_end: float,
    dt_int: float = 0.01,
    seed: int = 0,
    with_noise: bool = True,
) -> Trajectory:
    """One realization of the full stochastic SIR meta-population model.

    Movement applies to S, I and R with channel-conserving fluxes, so with
    noise suppressed the total population is conserved exactly (clamping can
    break conservation by tiny amounts in the noisy case).
    """
    g = stream(seed, "sim-full") if with_noise else None
    steps = _check_grid(t_end, dt_int)
    record_idx = _record_indices(steps, 1)
    S_rec, I_rec, R_rec, J_rec = _run_full(
        mobility, params, populations, I0, t_end, dt_int, g, 1, record_idx
    )
    times = record_idx * dt_int
    return Trajectory(
        "full-sir", dt_int, times, I_rec[:, 0, :], J_rec[:, 0, :], S=S_rec[:, 0, :], R=R_rec[:, 0, :]
    )


def linearized_ensemble(
    mobility: MobilityMatrix,
    params: TransmissionParams,
    I0: np.ndarray,
    record_times: np.ndarray,
    dt_int: float,
    n_paths: int,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Monte-Carlo ensemble of the linearized model.

    Returns (I, J) arrays shaped (len(record_times), n_paths, n), recorded at
    the requested times, which must be multiples of dt_int. This is the
    validation engine for the moment machinery.
    """
    record_times = np.asarray(record_times, dtype=float)
    t_end = float(record_times.max())
    _check_grid(t_end, dt_int)
    idx = np.array([round(t / dt_int) for t in record_times])
    if (np.abs(idx * dt_int - record_times) > 1e-9 * np.maximum(record_times, 1.0)).any():
        raise ValueError("record_times must be multiples of dt_int")
    g = stream(seed, "sim-linear-ens")
    I_rec, J_rec, _ = _run_linearized(mobility, params, I0, t_end, dt_int, g, n_paths, idx)
    return I_rec, J_rec


def full_sir_ensemble(
    mobility: MobilityMatrix,
    params: TransmissionParams,
    populations: PopulationAllocation,
    I0: np.ndarray,
    record_times: np.ndarray,
    dt_int: float,
    n_paths: int,
    seed: int = 0,
) -> tuple[np.ndarray, ...]:
    """Monte-Carlo ensemble of the full model: (S, I, R, J) record arrays."""
    record_times = np.asarray(record_times, dtype=float)
    t_end = float(record_times.max())
    _check_grid(t_end, dt_int)
    idx = np.array([round(t / dt_int) for t in record_times])
    if (np.abs(idx * dt_int - record_times) > 1e-9 * np.maximum(record_times, 1.0)).any():
        raise ValueError("record_times must be multiples of dt_int")
    g = stream(seed, "sim-full-ens")
    return _run_full(mobility, params, populations, I0, t_end, dt_int, g, n_paths, idx)


def negative_step_fraction(
    mobility: MobilityMatrix,
    params: TransmissionParams,
    I0: np.ndarray,
    t_end: float,
    dt_int: float,
    seed: int = 0,
    n_paths: int = 1,
) -> float:
    """Fraction of (path, step, node) updates that needed clamping at zero.

    Diagnostic for the discretization: the pre-clamp negative-excursion
    frequency vanishes as dt_int -> 0.
    """
    g = stream(seed, "sim-linear-neg")
    steps = _check_grid(t_end, dt_int)
    record_idx = np.array([steps])
    _, _, neg = _run_linearized(
        mobility, params, I0, t_end, dt_int, g, n_paths, record_idx, track_negatives=True
    )
    return neg / (steps * n_paths * mobility.n)


# ---------------------------------------------------------------------------
# observation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeSeriesDataset:
    """Regular observations of an outbreak, one row per observation time.

    kind "infectious-counts": values[d, i] = I_i(t_d), d = 0..D-1.
    kind "new-cases": values[d, i] = J_i(t_{d+1}) - J_i(t_d) over the
    reporting interval starting at t_d, and j0[i] = J_i(t_0), so the full
    cumulative series is derivable from the dataset alone.
    """

    kind: str
    delta_t: float
    values: np.ndarray
    j0: np.ndarray | None = None
    meta: dict | None = None

    def __post_init__(self) -> None:
        if self.kind not in (INFECTIOUS_COUNTS, NEW_CASES):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.delta_t <= 0:
            raise ValueError("delta_t must be positive")
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise ValueError("values must be a (D, n) matrix")
        if values.shape[0] < 2:
            raise ValueError("need at least 2 observation rows")
        if (values < 0).any():
            raise ValueError("observation values must be nonnegative")
        object.__setattr__(self, "values", _freeze(values))
        if self.kind == NEW_CASES:
            if self.j0 is None:
                raise ValueError("new-cases datasets require j0 (cumulative level at t_0)")
            j0 = np.asarray(self.j0, dtype=float)
            if j0.shape != (values.shape[1],) or (j0 < 0).any():
                raise ValueError("j0 must be a nonnegative length-n vector")
            object.__setattr__(self, "j0", _freeze(j0))
        elif self.j0 is not None:
            raise ValueError("j0 only applies to new-cases datasets")

    @property
    def n(self) -> int:
        return self.values.shape[1]

    @property
    def n_obs(self) -> int:
        return self.values.shape[0]

    def times(self) -> np.ndarray:
        return np.arange(self.n_obs) * self.delta_t

    def totals(self) -> np.ndarray:
        """Row sums: total infectious counts, or total new cases per interval."""
        return self.values.sum(axis=1)

    def j_totals(self) -> np.ndarray:
        """Aggregate cumulative series J(t_d), d = 0..D (new-cases only)."""
        if self.kind != NEW_CASES:
            raise ValueError("j_totals is defined for new-cases datasets")
        out = np.empty(self.n_obs + 1)
        out[0] = self.j0.sum()
        np.cumsum(self.totals(), out=out[1:])
        out[1:] += out[0]
        return out

    # -- persistence --------------------------------------------------------

    def to_files(self, path: str | Path) -> None:
        """Write <path> as CSV plus a <path stem>.json sidecar."""
        path = Path(path)
        header = "t," + ",".join(f"node_{i}" for i in range(self.n))
        lines = [header]
        for d in range(self.n_obs):
            t = repr(float(d * self.delta_t))
            lines.append(t + "," + ",".join(repr(float(v)) for v in self.values[d]))
        path.write_text("\n".join(lines) + "\n")
        sidecar = {
            "schema_version": 1,
            "kind": self.kind,
            "delta_t": self.delta_t,
            "n": self.n,
            "j0": [float(v) for v in self.j0] if self.j0 is not None else None,
            "meta": self.meta or {},
        }
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")

    @classmethod
    def from_files(cls, path: str | Path) -> "TimeSeriesDataset":
        path = Path(path)
        sidecar = json.loads(path.with_suffix(".json").read_text())
        if sidecar.get("schema_version") != 1:
            raise ValueError(f"unsupported dataset schema_version {sidecar.get('schema_version')!r}")
        lines = path.read_text().splitlines()
        n = sidecar["n"]
        expect = "t," + ",".join(f"node_{i}" for i in range(n))
        if lines[0] != expect:
            raise ValueError(f"unexpected CSV header {lines[0]!r}")
        rows = []
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            parts = line.split(",")
            if len(parts) != n + 1:
                raise ValueError(f"line {lineno}: expected {n + 1} columns, got {len(parts)}")
            rows.append([float(p) for p in parts[1:]])
        j0 = sidecar["j0"]
        return cls(
            kind=sidecar["kind"],
            delta_t=float(sidecar["delta_t"]),
            values=np.array(rows),
            j0=np.array(j0) if j0 is not None else None,
            meta=sidecar.get("meta") or {},
        )


def observe(
    trajectory: Trajectory,
    delta_t: float,
    n_obs: int,
    kind: str = INFECTIOUS_COUNTS,
    rounded: bool = False,
) -> TimeSeriesDataset:
    """Sample a trajectory on the regular observation grid t_d = d * delta_t.

    For new-cases output the increment at row d spans [t_d, t_{d+1}], so the
    trajectory must extend to n_obs * delta_t; increments are clamped at 0
    (with a warning when that fires) because reported case counts cannot
    decrease. rounded=True rounds values (and j0) to whole counts.
    """
    if kind not in (INFECTIOUS_COUNTS, NEW_CASES):
        raise ValueError(f"unknown dataset kind {kind!r}")
    stride_f = delta_t / trajectory.dt_int
    stride = round(stride_f)
    if stride < 1 or abs(stride - stride_f) > 1e-9 * stride_f:
        raise ValueError(f"delta_t {delta_t} is not a multiple of dt_int {trajectory.dt_int}")
    span = n_obs if kind == NEW_CASES else n_obs - 1
    if span * stride > len(trajectory) - 1:
        raise ValueError(
            f"trajectory too short: need {span * stride + 1} recorded steps, have {len(trajectory)}"
        )
    j0 = None
    if kind == INFECTIOUS_COUNTS:
        values = trajectory.I[: (n_obs - 1) * stride + 1 : stride].copy()
    else:
        j_grid = trajectory.J[: n_obs * stride + 1 : stride]
        values = np.diff(j_grid, axis=0)
        n_clamped = int((values < -1e-12).sum())
        if n_clamped:
            warnings.warn(
                f"clamped {n_clamped} negative new-case increments to 0", stacklevel=2
            )
        np.maximum(values, 0.0, out=values)
        j0 = np.maximum(j_grid[0].copy(), 0.0)
    if rounded:
        values = np.rint(values)
        if j0 is not None:
            j0 = np.rint(j0)
    return TimeSeriesDataset(kind=kind, delta_t=delta_t, values=values, j0=j0)
