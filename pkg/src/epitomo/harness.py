"""Configuration-driven experiment runner.

Reproduces the synthetic benchmark studies at desk scale (generate a random
network, simulate an outbreak on it, observe, estimate, score), ingests real
cumulative-case tables for the case-study pipeline, and writes per-trial and
aggregate results to CSV/JSON plus plain plot-data files.

Everything downstream of a config is deterministic given its seed; per-trial
wall-clock times are recorded for reporting but excluded from determinism
comparisons.
"""
from __future__ import annotations

import csv
import datetime
import json
import math
import time
import warnings
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .estimate import (
    AnnealingSchedule,
    ParamEstimate,
    TopologyEstimate,
    TopologyRank,
    convert_dJ_to_I,
    estimate_alpha_beta,
    estimate_from_J_totals,
    rank_topology_estimates,
    sa_topology_search,
)
from .evaluation import ErrorReport, naive_correlation_estimate
from .moments import exact_moments
from .netgen import NeighborMatrix, generate_er_topology, mobility_from_topology
from .rng import spawn_trial_seeds
from .simulate import (
    INFECTIOUS_COUNTS,
    NEW_CASES,
    TimeSeriesDataset,
    TransmissionParams,
    linearized_ensemble,
    observe,
    simulate_linearized,
)

__all__ = [
    "CONFIG_SCHEMA_VERSION",
    "CaseStudyResult",
    "ExperimentConfig",
    "ExperimentReport",
    "TrialResult",
    "emit_plot_series",
    "emit_report",
    "ingest_cumulative_cases",
    "moment_agreement_check",
    "run_baseline_experiment",
    "run_case_study",
    "run_synthetic_experiment",
    "write_cumulative_csv",
]

CONFIG_SCHEMA_VERSION = 1

# Rate-sum convention used when a config gives the ratio r instead of the
# rates themselves: alpha + beta is held at this value.
RATE_SUM = 0.1

_KIND_CHOICES = (INFECTIOUS_COUNTS, NEW_CASES)


@dataclass(frozen=True)
class ExperimentConfig:
    """Complete knob set for one synthetic experiment condition.

    A config echoes back through every report, so any parameter consumed by
    any stage of the pipeline must be a field here. ``sa_steps`` and
    ``population_total`` default to None, meaning the size-derived defaults
    (200 n^2 annealing steps, 1e6 residents per node).
    """

    n: int
    avg_degree: float
    alpha: float
    beta: float
    gamma_total: float
    delta_t: float = 1.0
    d_obs: int = 100
    dataset_kind: str = INFECTIOUS_COUNTS
    trials: int = 20
    sa_steps: int | None = None
    seed: int = 0
    population_total: float | None = None
    population_exponent: float = 0.5
    index_cases: float = 200.0
    dt_int: float = 0.05
    schema_version: int = CONFIG_SCHEMA_VERSION

    def __post_init__(self) -> None:
        if self.schema_version != CONFIG_SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema_version {self.schema_version!r}")
        if self.n < 2:
            raise ValueError("n must be at least 2")
        if not 0 <= self.avg_degree <= self.n - 1:
            raise ValueError("avg_degree must lie in [0, n-1]")
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if self.gamma_total < 0:
            raise ValueError("gamma_total must be nonnegative")
        if self.delta_t <= 0 or self.dt_int <= 0:
            raise ValueError("delta_t and dt_int must be positive")
        stride = self.delta_t / self.dt_int
        if abs(stride - round(stride)) > 1e-9 * stride:
            raise ValueError("delta_t must be an integer multiple of dt_int")
        if self.d_obs < 3:
            raise ValueError("need at least 3 observation rows")
        if self.dataset_kind not in _KIND_CHOICES:
            raise ValueError(f"unknown dataset_kind {self.dataset_kind!r}")
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if self.sa_steps is not None and self.sa_steps < 1:
            raise ValueError("sa_steps must be at least 1")
        if self.population_total is not None and self.population_total <= 0:
            raise ValueError("population_total must be positive")
        if self.index_cases <= 0:
            raise ValueError("index_cases must be positive")

    @property
    def r(self) -> float:
        return self.alpha / self.beta

    def params(self) -> TransmissionParams:
        return TransmissionParams(self.alpha, self.beta, self.gamma_total)

    def schedule(self) -> AnnealingSchedule:
        if self.sa_steps is None:
            return AnnealingSchedule.for_network_size(self.n)
        return AnnealingSchedule(steps=self.sa_steps)

    def resolved_population_total(self) -> float:
        if self.population_total is None:
            return 1e6 * self.n
        return self.population_total

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, object]) -> "ExperimentConfig":
        """Build a config from a parsed JSON/TOML mapping, strictly.

        Unknown keys are rejected. The transmission rates may be given
        either directly (``alpha``+``beta``) or as the ratio ``r`` (mapped
        onto alpha + beta = 0.1); giving both requires them to agree.
        """
        known = {f.name for f in fields(cls)} | {"r"}
        unknown = sorted(set(mapping) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        data = dict(mapping)
        r = data.pop("r", None)
        if r is not None:
            if not isinstance(r, (int, float)) or r <= 0:
                raise ValueError("r must be a positive number")
            if "alpha" in data or "beta" in data:
                if "alpha" not in data or "beta" not in data:
                    raise ValueError("give alpha and beta together, or r alone")
                ratio = data["alpha"] / data["beta"]
                if abs(ratio - r) > 1e-9 * r:
                    raise ValueError(
                        f"inconsistent rates: alpha/beta = {ratio!r} but r = {r!r}"
                    )
            else:
                p = TransmissionParams.from_ratio(r, rate_sum=RATE_SUM)
                data["alpha"] = p.alpha
                data["beta"] = p.beta
        elif "alpha" not in data or "beta" not in data:
            raise ValueError("config needs either r or both alpha and beta")
        return cls(**data)

    def echo(self) -> dict:
        """Full knob dump for reports, with derived defaults resolved."""
        return {
            "schema_version": self.schema_version,
            "n": self.n,
            "avg_degree": self.avg_degree,
            "alpha": self.alpha,
            "beta": self.beta,
            "r": self.r,
            "gamma_total": self.gamma_total,
            "delta_t": self.delta_t,
            "d_obs": self.d_obs,
            "dataset_kind": self.dataset_kind,
            "trials": self.trials,
            "sa_steps": self.schedule().steps,
            "seed": self.seed,
            "population_total": self.resolved_population_total(),
            "population_exponent": self.population_exponent,
            "index_cases": self.index_cases,
            "dt_int": self.dt_int,
        }


@dataclass(frozen=True)
class TrialResult:
    """Scores for one network trial. Failed trials carry NaN metrics."""

    trial: int
    e_l: float
    e_r: float
    loglik: float
    alpha_hat: float
    beta_hat: float
    r_hat: float
    runtime_s: float
    failed: bool = False
    message: str = ""

    @classmethod
    def failure(cls, trial: int, runtime_s: float, message: str) -> "TrialResult":
        nan = math.nan
        return cls(
            trial=trial,
            e_l=nan,
            e_r=nan,
            loglik=nan,
            alpha_hat=nan,
            beta_hat=nan,
            r_hat=nan,
            runtime_s=runtime_s,
            failed=True,
            message=message,
        )


_METRIC_FIELDS = ("e_l", "e_r", "loglik", "alpha_hat", "beta_hat", "r_hat")


@dataclass(frozen=True)
class ExperimentReport:
    """Per-trial rows plus everything needed to rerun them.

    Aggregates are not stored; they are always recomputed from the rows
    (see aggregate()), so the two cannot drift apart.
    """

    config: dict
    seed: int
    pipeline: str
    trials: tuple[TrialResult, ...]

    @property
    def n_failed(self) -> int:
        return sum(1 for t in self.trials if t.failed)

    def successful(self) -> tuple[TrialResult, ...]:
        return tuple(t for t in self.trials if not t.failed)

    def aggregate(self, metric: str) -> tuple[float, float] | None:
        """(mean, sample sd) of a metric over finite successful-trial values.

        None when no values exist. Sample sd uses ddof=1; a single value
        reports sd 0.0.
        """
        vals = [getattr(t, metric) for t in self.successful()]
        vals = [v for v in vals if math.isfinite(v)]
        if not vals:
            return None
        mean = float(np.mean(vals))
        sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        return mean, sd

    def metric_rows(self) -> list[tuple]:
        """Deterministic per-trial content: everything except wall time."""
        return [
            (t.trial, t.failed, t.message) + tuple(getattr(t, m) for m in _METRIC_FIELDS)
            for t in self.trials
        ]


def _trial_network(config: ExperimentConfig, trial_seed: int):
    topology = generate_er_topology(config.n, config.avg_degree, seed=trial_seed)
    mobility = mobility_from_topology(topology, config.gamma_total)
    return topology, mobility


def _trial_dataset(
    config: ExperimentConfig, mobility, trial_seed: int
) -> TimeSeriesDataset:
    i0 = np.zeros(config.n)
    i0[0] = config.index_cases
    trajectory = simulate_linearized(
        mobility,
        config.params(),
        i0,
        t_end=config.d_obs * config.delta_t,
        dt_int=config.dt_int,
        seed=trial_seed,
    )
    return observe(
        trajectory, config.delta_t, config.d_obs, kind=config.dataset_kind, rounded=True
    )


def _mle_trial(config: ExperimentConfig, trial: int, trial_seed: int) -> TrialResult:
    start = time.perf_counter()
    topology, mobility = _trial_network(config, trial_seed)
    dataset = _trial_dataset(config, mobility, trial_seed)

    if config.dataset_kind == INFECTIOUS_COUNTS:
        rates = estimate_alpha_beta(dataset.totals(), config.delta_t)
        sa_input = dataset
    else:
        rates = estimate_from_J_totals(
            dataset.j_totals(), config.delta_t, method="quasi-newton", seed=trial_seed
        )
        sa_input = convert_dJ_to_I(dataset, rates.alpha_hat)

    top = sa_topology_search(
        sa_input,
        rates.alpha_hat,
        rates.beta_hat,
        config.schedule(),
        seed=trial_seed,
        gamma_total_mode="known",
        gamma_total=config.gamma_total,
        trial_id=trial,
    )
    score = ErrorReport.compare(
        top.l_hat, topology, rates.alpha_hat, rates.beta_hat, config.alpha, config.beta
    )
    return TrialResult(
        trial=trial,
        e_l=score.e_l,
        e_r=score.e_r,
        loglik=top.loglik,
        alpha_hat=rates.alpha_hat,
        beta_hat=rates.beta_hat,
        r_hat=rates.r_hat,
        runtime_s=time.perf_counter() - start,
    )


def _naive_trial(config: ExperimentConfig, trial: int, trial_seed: int) -> TrialResult:
    start = time.perf_counter()
    topology, mobility = _trial_network(config, trial_seed)
    dataset = _trial_dataset(config, mobility, trial_seed)
    guess = naive_correlation_estimate(dataset)
    score = ErrorReport.compare(guess, topology, 1.0, 1.0, config.alpha, config.beta)
    nan = math.nan
    return TrialResult(
        trial=trial,
        e_l=score.e_l,
        e_r=nan,
        loglik=nan,
        alpha_hat=nan,
        beta_hat=nan,
        r_hat=nan,
        runtime_s=time.perf_counter() - start,
    )


def _run_trials(config: ExperimentConfig, pipeline: str, trial_fn) -> ExperimentReport:
    results = []
    for trial, trial_seed in enumerate(spawn_trial_seeds(config.seed, config.trials)):
        start = time.perf_counter()
        try:
            results.append(trial_fn(config, trial, trial_seed))
        except Exception as exc:
            elapsed = time.perf_counter() - start
            results.append(
                TrialResult.failure(trial, elapsed, f"{type(exc).__name__}: {exc}")
            )
    return ExperimentReport(
        config=config.echo(), seed=config.seed, pipeline=pipeline, trials=tuple(results)
    )


def run_synthetic_experiment(config: ExperimentConfig) -> ExperimentReport:
    """Generate/simulate/observe/estimate/score, one random network per trial.

    The estimation route follows the dataset kind: infectious counts use the
    closed-form rate estimator on the aggregate series; new-cases data fit
    the rates to the cumulative totals and convert increments to infection
    counts first. Either way the topology is then searched by annealing with
    the mobility scale treated as known. A trial that raises is recorded as
    failed and the run continues.
    """
    pipeline = "mle-I" if config.dataset_kind == INFECTIOUS_COUNTS else "mle-dJ"
    return _run_trials(config, pipeline, _mle_trial)


def run_baseline_experiment(config: ExperimentConfig) -> ExperimentReport:
    """Score the sign-of-correlation link guess on the same trial datasets.

    Uses the identical per-trial seed stream as run_synthetic_experiment, so
    a baseline report on the same config is a matched-pairs comparison. Only
    e_l is meaningful; the baseline produces no rate estimates.
    """
    if config.dataset_kind != INFECTIOUS_COUNTS:
        raise ValueError("correlation baseline needs infectious-counts datasets")
    return _run_trials(config, "naive-correlation", _naive_trial)


# ---------------------------------------------------------------------------
# moment self-check
# ---------------------------------------------------------------------------


def moment_agreement_check(
    topology: NeighborMatrix,
    params: TransmissionParams,
    i0: np.ndarray,
    t_checks: Sequence[float],
    n_paths: int = 100_000,
    dt_int: float = 0.02,
    seed: int = 0,
) -> dict:
    """Compare predicted moments against a Monte-Carlo ensemble.

    Runs the linearized simulator n_paths times and z-scores every entry of
    the five moment blocks (mean I, mean J, and the three covariance blocks)
    against the ODE predictions at each check time; the standard error is
    estimated from the same ensemble. Returns per-block worst |z| and the
    overall maximum.

    Note that the ensemble is simulated with the nonnegativity clamp that
    real counts require, while the predictions solve the unclamped linear
    model, so agreement is only expected when the start keeps all nodes well
    away from zero (say 50+ cases each).
    """
    t_checks = sorted(float(t) for t in t_checks)
    if not t_checks or t_checks[0] <= 0:
        raise ValueError("check times must be positive")
    mobility = mobility_from_topology(topology, params.gamma_total)
    record = np.array(t_checks)
    I, J = linearized_ensemble(
        mobility, params, np.asarray(i0, dtype=float), record, dt_int, n_paths, seed=seed
    )
    worst = {b: 0.0 for b in ("mI", "mJ", "vII", "vIJ", "vJJ")}
    for idx, t in enumerate(t_checks):
        ms = exact_moments(params, mobility, np.asarray(i0, dtype=float), t)
        Ik, Jk = I[idx], J[idx]
        for name, sample, predicted in (("mI", Ik, ms.mI), ("mJ", Jk, ms.mJ)):
            se = sample.std(axis=0, ddof=1) / math.sqrt(n_paths)
            z = np.abs(sample.mean(axis=0) - predicted) / np.maximum(se, 1e-300)
            worst[name] = max(worst[name], float(z.max()))
        cI = Ik - Ik.mean(axis=0)
        cJ = Jk - Jk.mean(axis=0)
        for name, a, b, predicted in (
            ("vII", cI, cI, ms.vII),
            ("vIJ", cI, cJ, ms.vIJ),
            ("vJJ", cJ, cJ, ms.vJJ),
        ):
            prod = a[:, :, None] * b[:, None, :]
            se = prod.std(axis=0, ddof=1) / math.sqrt(n_paths)
            z = np.abs(prod.mean(axis=0) - predicted) / np.maximum(se, 1e-300)
            worst[name] = max(worst[name], float(z.max()))
    return {
        "blocks": worst,
        "max_abs_z": max(worst.values()),
        "n_paths": n_paths,
        "t_checks": t_checks,
    }


# ---------------------------------------------------------------------------
# real-data ingestion
# ---------------------------------------------------------------------------


def _as_date(value: str | datetime.date, what: str) -> datetime.date:
    if isinstance(value, datetime.date):
        return value
    try:
        return datetime.date.fromisoformat(value)
    except ValueError as exc:
        raise ValueError(f"{what}: {exc}") from None


def ingest_cumulative_cases(
    path: str | Path,
    window_start: str | datetime.date,
    window_end: str | datetime.date,
    min_cases: float = 5.0,
) -> TimeSeriesDataset:
    """Read a cumulative-case CSV into a daily new-cases dataset.

    The file needs a ``date`` column (ISO dates) plus one column of
    cumulative counts per region. The observation window is the inclusive
    day grid from window_start to window_end with delta_t = 1 day. Days a
    region did not report are forward-filled from its last report (counts
    are step functions); downward revisions are clamped to zero new cases.
    Both adjustments are enumerated in warnings, never silent. Regions whose
    cumulative count 30 days into the window (or at its end, if sooner) is
    below min_cases are dropped.

    Raises ValueError for unparseable rows (listing line numbers), a window
    shorter than two intervals, or no region surviving the filter.
    """
    path = Path(path)
    start = _as_date(window_start, "window_start")
    end = _as_date(window_end, "window_end")
    n_days = (end - start).days
    if n_days < 2:
        raise ValueError("window must span at least 2 reporting intervals")

    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = [c.strip() for c in rows[0]]
    if len(header) < 2 or header[0].lower() != "date":
        raise ValueError(f"{path}: first column must be 'date', then one column per region")
    regions = header[1:]
    if len(set(regions)) != len(regions):
        raise ValueError(f"{path}: duplicate region columns")

    reported: dict[str, dict[datetime.date, float]] = {r: {} for r in regions}
    bad_lines = []
    seen_dates: dict[datetime.date, int] = {}
    for line_no, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            bad_lines.append(f"line {line_no}: expected {len(header)} fields, got {len(row)}")
            continue
        try:
            day = datetime.date.fromisoformat(row[0].strip())
        except ValueError:
            bad_lines.append(f"line {line_no}: bad date {row[0]!r}")
            continue
        if day in seen_dates:
            bad_lines.append(
                f"line {line_no}: duplicate date {day} (first seen line {seen_dates[day]})"
            )
            continue
        seen_dates[day] = line_no
        for region, cell in zip(regions, row[1:]):
            cell = cell.strip()
            if not cell:
                continue
            try:
                value = float(cell)
            except ValueError:
                bad_lines.append(f"line {line_no}: bad count {cell!r} for {region}")
                continue
            if value < 0 or not math.isfinite(value):
                bad_lines.append(f"line {line_no}: bad count {cell!r} for {region}")
                continue
            reported[region][day] = value
    if bad_lines:
        raise ValueError(f"{path}: unparseable rows: " + "; ".join(bad_lines))

    grid = [start + datetime.timedelta(days=k) for k in range(n_days + 1)]
    filled: list[str] = []
    levels: dict[str, np.ndarray] = {}
    for region in regions:
        series = reported[region]
        out = np.zeros(len(grid))
        last = 0.0
        for day in sorted(d for d in series if d < start):
            last = series[day]
        for k, day in enumerate(grid):
            if day in series:
                last = series[day]
            else:
                filled.append(f"{region}@{day.isoformat()}")
            out[k] = last
        levels[region] = out

    cutoff_idx = min(30, n_days)
    kept = [r for r in regions if levels[r][cutoff_idx] >= min_cases]
    dropped = [r for r in regions if r not in kept]
    if not kept:
        raise ValueError(
            f"no region reaches {min_cases} cumulative cases by "
            f"{grid[cutoff_idx].isoformat()}"
        )

    clamped: list[str] = []
    columns = []
    for region in kept:
        deltas = np.diff(levels[region])
        neg = deltas < 0
        if neg.any():
            for k in np.flatnonzero(neg):
                clamped.append(f"{region}@{grid[k + 1].isoformat()}")
            deltas = np.where(neg, 0.0, deltas)
        columns.append(deltas)

    if filled:
        warnings.warn(
            f"forward-filled {len(filled)} missing daily reports: " + ", ".join(filled),
            stacklevel=2,
        )
    if clamped:
        warnings.warn(
            f"clamped {len(clamped)} negative revisions to zero: " + ", ".join(clamped),
            stacklevel=2,
        )
    if dropped:
        warnings.warn(
            f"dropped {len(dropped)} regions below {min_cases} cases by "
            f"{grid[cutoff_idx].isoformat()}: " + ", ".join(dropped),
            stacklevel=2,
        )

    return TimeSeriesDataset(
        kind=NEW_CASES,
        delta_t=1.0,
        values=np.column_stack(columns),
        j0=np.array([levels[r][0] for r in kept]),
        meta={
            "regions": list(kept),
            "window_start": start.isoformat(),
            "window_end": end.isoformat(),
            "source": str(path),
        },
    )


def write_cumulative_csv(
    dataset: TimeSeriesDataset,
    path: str | Path,
    start_date: str | datetime.date | None = None,
) -> None:
    """Write a new-cases dataset back out as a cumulative-case CSV.

    The inverse of ingest_cumulative_cases for clean data: whole-count
    datasets round-trip bit-for-bit (cumulative levels of integers are
    exact). Region names and the start date come from dataset.meta when
    present; otherwise generic names and start_date are used.
    """
    if dataset.kind != NEW_CASES:
        raise ValueError("only new-cases datasets have a cumulative form")
    meta = dataset.meta or {}
    regions = meta.get("regions") or [f"R{i:02d}" for i in range(dataset.n)]
    if len(regions) != dataset.n:
        raise ValueError("region list does not match dataset width")
    if start_date is None:
        start_date = meta.get("window_start")
        if start_date is None:
            raise ValueError("start_date needed (dataset meta has no window_start)")
    start = _as_date(start_date, "start_date")

    levels = np.empty((dataset.n_obs + 1, dataset.n))
    levels[0] = dataset.j0
    np.cumsum(dataset.values, axis=0, out=levels[1:])
    levels[1:] += dataset.j0

    def cell(x: float) -> str:
        return str(int(x)) if float(x).is_integer() else repr(float(x))

    lines = ["date," + ",".join(regions)]
    for k in range(levels.shape[0]):
        day = (start + datetime.timedelta(days=k)).isoformat()
        lines.append(day + "," + ",".join(cell(v) for v in levels[k]))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# case study
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CaseStudyResult:
    """Rates fitted from cumulative totals plus the ranked topologies."""

    rates: ParamEstimate
    rankings: tuple[TopologyRank, ...]
    report: ExperimentReport


def run_case_study(
    dataset: TimeSeriesDataset,
    trials: int,
    schedule: AnnealingSchedule,
    seed: int = 0,
    gamma_total_mode: str = "search",
    gamma_total: float | None = None,
) -> CaseStudyResult:
    """Full real-data pipeline on a new-cases dataset.

    Fits (alpha, beta, I(0)) to the aggregate cumulative series, converts
    the per-node increments to infection counts with the fitted alpha, then
    runs independent annealing trials and ranks the distinct topologies
    found. The report's per-trial rows carry log-likelihood and runtime;
    topology error against truth is unknown here, so e_l and e_r are NaN.
    """
    if dataset.kind != NEW_CASES:
        raise ValueError("case study needs a new-cases dataset")
    if trials < 1:
        raise ValueError("trials must be at least 1")
    rates = estimate_from_J_totals(
        dataset.j_totals(), dataset.delta_t, method="quasi-newton", seed=seed
    )
    converted = convert_dJ_to_I(dataset, rates.alpha_hat)

    rows = []
    estimates: list[TopologyEstimate] = []
    nan = math.nan
    for trial, trial_seed in enumerate(spawn_trial_seeds(seed, trials)):
        start = time.perf_counter()
        try:
            est = sa_topology_search(
                converted,
                rates.alpha_hat,
                rates.beta_hat,
                schedule,
                seed=trial_seed,
                gamma_total_mode=gamma_total_mode,
                gamma_total=gamma_total,
                trial_id=trial,
            )
        except Exception as exc:
            elapsed = time.perf_counter() - start
            rows.append(TrialResult.failure(trial, elapsed, f"{type(exc).__name__}: {exc}"))
            continue
        estimates.append(est)
        rows.append(
            TrialResult(
                trial=trial,
                e_l=nan,
                e_r=nan,
                loglik=est.loglik,
                alpha_hat=rates.alpha_hat,
                beta_hat=rates.beta_hat,
                r_hat=rates.r_hat,
                runtime_s=time.perf_counter() - start,
            )
        )
    if not estimates:
        raise RuntimeError("every annealing trial failed")

    config_echo = {
        "schema_version": CONFIG_SCHEMA_VERSION,
        "n": dataset.n,
        "d_obs": dataset.n_obs,
        "delta_t": dataset.delta_t,
        "dataset_kind": dataset.kind,
        "trials": trials,
        "sa_steps": schedule.steps,
        "seed": seed,
        "gamma_total_mode": gamma_total_mode,
        "gamma_total": gamma_total,
        "regions": (dataset.meta or {}).get("regions"),
    }
    report = ExperimentReport(
        config=config_echo, seed=seed, pipeline="case-study", trials=tuple(rows)
    )
    return CaseStudyResult(
        rates=rates, rankings=tuple(rank_topology_estimates(estimates)), report=report
    )


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------


_CSV_COLUMNS = (
    "trial",
    "e_l",
    "e_r",
    "loglik",
    "alpha_hat",
    "beta_hat",
    "r_hat",
    "runtime_s",
    "failed",
    "message",
)


def _json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def _trial_dict(t: TrialResult) -> dict:
    return {c: _json_safe(getattr(t, c)) for c in _CSV_COLUMNS}


def emit_report(
    report: ExperimentReport,
    out_dir: str | Path,
    formats: Iterable[str] = ("csv", "json", "plot"),
    x_field: str = "avg_degree",
    extras: Mapping[str, object] | None = None,
) -> list[Path]:
    """Write a report to disk; returns the paths written.

    csv: trials.csv, one row per trial plus one aggregate row of means over
    successful trials (omitted when there are no trials). json:
    summary.json with the config echo, per-trial rows and recomputable
    mean/sd aggregates; extras are merged in at the top level. plot:
    plot_e_l.csv and plot_e_r.csv holding x,y,sigma rows against the
    configured x_field, for external plotting.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    formats = set(formats)
    unknown = formats - {"csv", "json", "plot"}
    if unknown:
        raise ValueError(f"unknown report formats: {sorted(unknown)}")
    written = []

    if "csv" in formats:
        target = out / "trials.csv"
        with target.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(_CSV_COLUMNS)
            for t in report.trials:
                writer.writerow([getattr(t, c) for c in _CSV_COLUMNS])
            if report.trials:
                agg = ["aggregate"]
                for c in _CSV_COLUMNS[1:-2]:
                    pair = report.aggregate(c)
                    agg.append(math.nan if pair is None else pair[0])
                agg += [report.n_failed, f"mean over {len(report.successful())} ok trials"]
                writer.writerow(agg)
        written.append(target)

    if "json" in formats:
        target = out / "summary.json"
        aggregates = {}
        for metric in _METRIC_FIELDS:
            pair = report.aggregate(metric)
            aggregates[metric] = (
                None if pair is None else {"mean": pair[0], "sd": pair[1]}
            )
        payload = {
            "schema_version": CONFIG_SCHEMA_VERSION,
            "pipeline": report.pipeline,
            "seed": report.seed,
            "config": {k: _json_safe(v) for k, v in report.config.items()},
            "n_trials": len(report.trials),
            "n_failed": report.n_failed,
            "aggregates": aggregates,
            "runtime_s_total": sum(t.runtime_s for t in report.trials),
            "trials": [_trial_dict(t) for t in report.trials],
        }
        if extras:
            payload.update(extras)
        target.write_text(json.dumps(payload, indent=2, allow_nan=False) + "\n")
        written.append(target)

    if "plot" in formats:
        x = report.config.get(x_field)
        for metric in ("e_l", "e_r"):
            target = out / f"plot_{metric}.csv"
            pair = report.aggregate(metric)
            with target.open("w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["x", "y", "sigma"])
                if pair is not None and x is not None:
                    writer.writerow([x, pair[0], pair[1]])
            written.append(target)

    return written


def emit_plot_series(
    reports: Sequence[ExperimentReport],
    x_field: str,
    metric: str,
    path: str | Path,
) -> Path:
    """One x,y,sigma row per report: a swept-knob curve for plotting.

    x is each report's config value for x_field; y and sigma are the
    mean and sd of the metric over that report's successful trials.
    Reports with no finite values for the metric are skipped.
    """
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "sigma"])
        for report in reports:
            pair = report.aggregate(metric)
            x = report.config.get(x_field)
            if pair is None or x is None:
                continue
            writer.writerow([x, pair[0], pair[1]])
    return path
