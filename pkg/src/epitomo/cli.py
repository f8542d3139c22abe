"""Command-line entry point.

Five experiment verbs, each driven by a single JSON or TOML config file:

  synth         run a synthetic benchmark condition end to end
  baseline      score the sign-of-correlation link guess on the same trials
  estimate      estimate rates and topology from a stored dataset
  casestudy     ingest a cumulative-case CSV and run the real-data pipeline
  moments-check compare predicted moments against a fresh Monte-Carlo ensemble

plus one debug verb, moments-dump, which prints the predicted moment state
at a single time as JSON.

Common flags: --seed overrides the config seed, --out picks the output
directory, --full restores paper-scale trial counts (100 networks, or the
full 1e5-path ensemble for moments-check). Exit status is 0 only when every
trial (or every moment block) succeeded.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path
from typing import Mapping

import numpy as np

from .estimate import AnnealingSchedule, multi_trial_topology_ranking
from .evaluation import random_guess_stats
from .moments import exact_moments
from .harness import (
    CONFIG_SCHEMA_VERSION,
    ExperimentConfig,
    emit_report,
    ingest_cumulative_cases,
    moment_agreement_check,
    run_baseline_experiment,
    run_case_study,
    run_synthetic_experiment,
)
from .netgen import generate_er_topology, mobility_from_topology
from .simulate import (
    INFECTIOUS_COUNTS,
    NEW_CASES,
    TimeSeriesDataset,
    TransmissionParams,
)

FULL_TRIALS = 100
FULL_PATHS = 100_000


def _load_config(path: Path) -> dict:
    suffix = path.suffix.lower()
    if suffix == ".json":
        return json.loads(path.read_text())
    if suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        return tomllib.loads(path.read_text())
    raise ValueError(f"config must be a .json or .toml file, got {path.name}")


def _check_keys(raw: Mapping[str, object], allowed: set[str], verb: str) -> None:
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ValueError(f"unknown {verb} config keys: {', '.join(unknown)}")
    version = raw.get("schema_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise ValueError(f"unsupported config schema_version {version!r}")


def _experiment_config(raw: dict, args) -> ExperimentConfig:
    if args.seed is not None:
        raw = {**raw, "seed": args.seed}
    if args.full:
        raw = {**raw, "trials": FULL_TRIALS}
    return ExperimentConfig.from_mapping(raw)


def _print_aggregates(report) -> None:
    n_ok = len(report.successful())
    print(f"{len(report.trials)} trials, {report.n_failed} failed")
    for metric in ("e_l", "e_r"):
        pair = report.aggregate(metric)
        if pair is not None:
            print(f"mean {metric} = {pair[0]:.4f} (sd {pair[1]:.4f}, {n_ok} trials)")


def _cmd_synth(args) -> int:
    config = _experiment_config(_load_config(Path(args.config)), args)
    report = run_synthetic_experiment(config)
    emit_report(report, args.out)
    _print_aggregates(report)
    return 0 if report.n_failed == 0 else 1


def _cmd_baseline(args) -> int:
    config = _experiment_config(_load_config(Path(args.config)), args)
    report = run_baseline_experiment(config)
    mean, sd = random_guess_stats(config.n)
    emit_report(
        report, args.out, extras={"random_guess": {"mean": mean, "sd": sd}}
    )
    _print_aggregates(report)
    print(f"random guess: mean {mean} (sd {sd:.4f})")
    return 0 if report.n_failed == 0 else 1


_ESTIMATE_KEYS = {
    "schema_version",
    "dataset",
    "trials",
    "sa_steps",
    "seed",
    "gamma_total",
    "gamma_total_mode",
}


def _cmd_estimate(args) -> int:
    raw = _load_config(Path(args.config))
    _check_keys(raw, _ESTIMATE_KEYS, "estimate")
    if "dataset" not in raw:
        raise ValueError("estimate config needs a 'dataset' path")
    dataset = TimeSeriesDataset.from_files(raw["dataset"])
    seed = args.seed if args.seed is not None else int(raw.get("seed", 0))
    trials = FULL_TRIALS if args.full else int(raw.get("trials", 10))
    steps = raw.get("sa_steps")
    schedule = (
        AnnealingSchedule(steps=int(steps))
        if steps is not None
        else AnnealingSchedule.for_network_size(dataset.n)
    )
    mode = raw.get("gamma_total_mode", "known")
    gamma_total = raw.get("gamma_total")

    from .estimate import convert_dJ_to_I, estimate_alpha_beta, estimate_from_J_totals

    if dataset.kind == INFECTIOUS_COUNTS:
        rates = estimate_alpha_beta(dataset.totals(), dataset.delta_t)
        sa_input = dataset
    else:
        rates = estimate_from_J_totals(
            dataset.j_totals(), dataset.delta_t, method="quasi-newton", seed=seed
        )
        sa_input = convert_dJ_to_I(dataset, rates.alpha_hat)
    ranking = multi_trial_topology_ranking(
        sa_input,
        rates.alpha_hat,
        rates.beta_hat,
        trials,
        schedule,
        seed=seed,
        gamma_total_mode=mode,
        gamma_total=gamma_total,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "schema_version": CONFIG_SCHEMA_VERSION,
        "dataset": str(raw["dataset"]),
        "kind": dataset.kind,
        "seed": seed,
        "rates": {
            "alpha_hat": rates.alpha_hat,
            "beta_hat": rates.beta_hat,
            "r_hat": None if math.isnan(rates.r_hat) else rates.r_hat,
            "i0_hat": rates.i0_hat,
            "flagged": rates.flagged,
        },
        "rankings": [_rank_dict(r) for r in ranking],
    }
    (out / "estimate.json").write_text(json.dumps(payload, indent=2) + "\n")
    print(
        f"alpha_hat={rates.alpha_hat:.4f} beta_hat={rates.beta_hat:.4f} "
        f"r_hat={rates.r_hat:.4f}"
    )
    print(f"{len(ranking)} distinct topologies from {trials} trials")
    return 0


def _rank_dict(rank) -> dict:
    est = rank.estimate
    return {
        "links": [list(pair) for pair in est.l_hat.links()],
        "n": est.l_hat.n,
        "loglik": est.loglik,
        "gamma_total": est.gamma_total,
        "multiplicity": rank.multiplicity,
        "trial_ids": list(rank.trial_ids),
    }


_CASESTUDY_KEYS = {
    "schema_version",
    "data",
    "window_start",
    "window_end",
    "min_cases",
    "trials",
    "sa_steps",
    "seed",
    "gamma_total",
    "gamma_total_mode",
}


def _cmd_casestudy(args) -> int:
    raw = _load_config(Path(args.config))
    _check_keys(raw, _CASESTUDY_KEYS, "casestudy")
    for key in ("data", "window_start", "window_end"):
        if key not in raw:
            raise ValueError(f"casestudy config needs {key!r}")
    dataset = ingest_cumulative_cases(
        raw["data"],
        raw["window_start"],
        raw["window_end"],
        min_cases=float(raw.get("min_cases", 5)),
    )
    seed = args.seed if args.seed is not None else int(raw.get("seed", 0))
    trials = FULL_TRIALS if args.full else int(raw.get("trials", 10))
    steps = raw.get("sa_steps")
    schedule = (
        AnnealingSchedule(steps=int(steps))
        if steps is not None
        else AnnealingSchedule.for_network_size(dataset.n)
    )
    result = run_case_study(
        dataset,
        trials,
        schedule,
        seed=seed,
        gamma_total_mode=raw.get("gamma_total_mode", "search"),
        gamma_total=raw.get("gamma_total"),
    )
    out = Path(args.out)
    emit_report(result.report, out)
    regions = (dataset.meta or {}).get("regions")
    payload = {
        "schema_version": CONFIG_SCHEMA_VERSION,
        "regions": regions,
        "rates": {
            "alpha_hat": result.rates.alpha_hat,
            "beta_hat": result.rates.beta_hat,
            "r_hat": None if math.isnan(result.rates.r_hat) else result.rates.r_hat,
            "i0_hat": result.rates.i0_hat,
            "flagged": result.rates.flagged,
        },
        "rankings": [_rank_dict(r) for r in result.rankings],
    }
    (out / "casestudy.json").write_text(json.dumps(payload, indent=2) + "\n")
    print(
        f"alpha_hat={result.rates.alpha_hat:.4f} beta_hat={result.rates.beta_hat:.4f} "
        f"r_hat={result.rates.r_hat:.4f} i0_hat={result.rates.i0_hat:.1f}"
    )
    for i, rank in enumerate(result.rankings[:3]):
        est = rank.estimate
        print(
            f"#{i + 1} loglik={est.loglik:.2f} multiplicity={rank.multiplicity} "
            f"links={est.l_hat.links()}"
        )
    return 0 if result.report.n_failed == 0 else 1


_MOMENTS_KEYS = {
    "schema_version",
    "n",
    "avg_degree",
    "alpha",
    "beta",
    "r",
    "gamma_total",
    "i0",
    "t_checks",
    "n_paths",
    "dt_int",
    "seed",
}


def _cmd_moments_check(args) -> int:
    raw = _load_config(Path(args.config))
    _check_keys(raw, _MOMENTS_KEYS, "moments-check")
    for key in ("n", "avg_degree", "gamma_total"):
        if key not in raw:
            raise ValueError(f"moments-check config needs {key!r}")
    if "r" in raw:
        if "alpha" in raw or "beta" in raw:
            raise ValueError("give alpha and beta, or r, not both")
        params = TransmissionParams.from_ratio(
            float(raw["r"]), gamma_total=float(raw["gamma_total"])
        )
    elif "alpha" in raw and "beta" in raw:
        params = TransmissionParams(
            float(raw["alpha"]), float(raw["beta"]), float(raw["gamma_total"])
        )
    else:
        raise ValueError("moments-check config needs either r or alpha and beta")
    seed = args.seed if args.seed is not None else int(raw.get("seed", 0))
    n_paths = FULL_PATHS if args.full else int(raw.get("n_paths", 20_000))
    n = int(raw["n"])
    topology = generate_er_topology(n, float(raw["avg_degree"]), seed=seed)
    i0 = float(raw.get("i0", 200.0)) * np.ones(n)
    result = moment_agreement_check(
        topology,
        params,
        i0,
        t_checks=list(raw.get("t_checks", [1.0, 5.0, 10.0])),
        n_paths=n_paths,
        dt_int=float(raw.get("dt_int", 0.02)),
        seed=seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "schema_version": CONFIG_SCHEMA_VERSION,
        "seed": seed,
        "params": {"alpha": params.alpha, "beta": params.beta, "gamma_total": params.gamma_total},
        **result,
    }
    (out / "moments_check.json").write_text(json.dumps(payload, indent=2) + "\n")
    for block, z in result["blocks"].items():
        print(f"{block}: worst |z| = {z:.2f}")
    ok = result["max_abs_z"] < 3.0
    print(f"max |z| = {result['max_abs_z']:.2f} ({'OK' if ok else 'DISAGREES'}, "
          f"{n_paths} paths)")
    return 0 if ok else 1


_MOMENTS_DUMP_KEYS = {
    "schema_version",
    "n",
    "avg_degree",
    "alpha",
    "beta",
    "r",
    "gamma_total",
    "i0",
    "t",
    "seed",
}


def _cmd_moments_dump(args) -> int:
    raw = _load_config(Path(args.config))
    _check_keys(raw, _MOMENTS_DUMP_KEYS, "moments-dump")
    for key in ("n", "avg_degree", "gamma_total", "t"):
        if key not in raw:
            raise ValueError(f"moments-dump config needs {key!r}")
    if "r" in raw:
        if "alpha" in raw or "beta" in raw:
            raise ValueError("give alpha and beta, or r, not both")
        params = TransmissionParams.from_ratio(
            float(raw["r"]), gamma_total=float(raw["gamma_total"])
        )
    elif "alpha" in raw and "beta" in raw:
        params = TransmissionParams(
            float(raw["alpha"]), float(raw["beta"]), float(raw["gamma_total"])
        )
    else:
        raise ValueError("moments-dump config needs either r or alpha and beta")
    seed = args.seed if args.seed is not None else int(raw.get("seed", 0))
    n = int(raw["n"])
    topology = generate_er_topology(n, float(raw["avg_degree"]), seed=seed)
    mobility = mobility_from_topology(topology, params.gamma_total)
    i0_raw = raw.get("i0", 200.0)
    i0 = (np.asarray(i0_raw, dtype=float) if isinstance(i0_raw, list)
          else float(i0_raw) * np.ones(n))
    state = exact_moments(params, mobility, i0, float(raw["t"]))
    payload = {
        "schema_version": CONFIG_SCHEMA_VERSION,
        "seed": seed,
        "params": {"alpha": params.alpha, "beta": params.beta,
                   "gamma_total": params.gamma_total},
        "links": [list(pair) for pair in topology.links()],
        "t": state.t,
        "mI": state.mI.tolist(),
        "mJ": state.mJ.tolist(),
        "vII": state.vII.tolist(),
        "vIJ": state.vIJ.tolist(),
        "vJJ": state.vJJ.tolist(),
    }
    text = json.dumps(payload, indent=2)
    print(text)
    if args.out != ".":
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "moment_state.json").write_text(text + "\n")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="epitomo",
        description="Outbreak transmission-parameter and topology estimation",
    )
    sub = parser.add_subparsers(dest="verb", required=True)
    handlers = {
        "synth": (_cmd_synth, "run a synthetic benchmark condition"),
        "baseline": (_cmd_baseline, "run the correlation baseline on the same trials"),
        "estimate": (_cmd_estimate, "estimate rates and topology from a dataset file"),
        "casestudy": (_cmd_casestudy, "run the real-data pipeline on cumulative cases"),
        "moments-check": (_cmd_moments_check, "validate moments against an ensemble"),
        "moments-dump": (_cmd_moments_dump, "debug: print a predicted moment state as JSON"),
    }
    for name, (_, help_text) in handlers.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="path to a JSON or TOML config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=".", help="output directory (default: .)")
        p.add_argument(
            "--full",
            action="store_true",
            help="paper-scale run: 100 trials (or the full-size ensemble)",
        )
    args = parser.parse_args(argv)
    handler = handlers[args.verb][0]
    try:
        return handler(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
