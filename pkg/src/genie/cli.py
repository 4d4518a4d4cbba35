"""Command line entry points.

One subcommand per pipeline stage, each reading and writing explicit
artifact paths, plus ``run-job`` which drives a whole pipeline from a
single config file. Exit codes: 0 success, 1 stage failure, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .auction import replay_check
from .boosting import GbtParams, gbt_train
from .click_model import (
    build_binning_spec,
    impressions_from_logs,
    load_click_model,
    probit_train,
    save_click_model,
)
from .comparison import ScenarioConfig, compare_estimators
from .cube import DEFAULT_DIMS, DataCube, kpi_report, read_report, write_report
from .errors import ConfigurationError, GenieError
from .explore import Constraint, ExploreParams, Objective, optimize, surrogate_dataset_from_report
from .job import (
    JobConfig,
    default_workers,
    load_grid_file,
    run_job,
    simulate_records,
    write_grid_file,
    _grid_from_settings,
)
from .marketplace import GeneratorConfig, MarketplaceModel, generate_logs, generate_marketplace
from .records import DriftSpec, PolicyConfig, load_log_file, write_log_file
from .seeds import derive_seed, draw_root_seed


def _resolve_seed(args) -> int:
    if args.seed is None:
        seed = draw_root_seed()
        print(f"seed: {seed} (drawn; pass --seed {seed} to reproduce)")
        return seed
    return args.seed


def _load_json(path_or_inline: str) -> dict:
    p = Path(path_or_inline)
    if p.exists():
        with open(p, "r", encoding="utf-8") as fh:
            return json.load(fh)
    return json.loads(path_or_inline)


def _policy(arg: str | None) -> PolicyConfig:
    return PolicyConfig(dict(_load_json(arg))) if arg else PolicyConfig()


def cmd_generate(args) -> int:
    seed = _resolve_seed(args)
    if args.marketplace:
        model = MarketplaceModel.load(args.marketplace)
    else:
        model = generate_marketplace(
            GeneratorConfig(**_load_json(args.generator_config)), derive_seed(seed, "marketplace")
        )
    drift = None
    if args.drift_index is not None:
        if not args.drift_policy:
            raise ConfigurationError("--drift-index requires --drift-policy")
        drift = DriftSpec(drift_index=args.drift_index, drifted_policy=_policy(args.drift_policy))
    dataset = generate_logs(model, _policy(args.policy), args.n, drift=drift, seed=derive_seed(seed, "logs"))
    model.save(args.model_out)
    n = write_log_file(dataset.records, args.out)
    print(f"wrote {n} records to {args.out}; marketplace model to {args.model_out}")
    return 0


def cmd_ingest(args) -> int:
    records, stats = load_log_file(args.logs)
    print(
        f"total lines: {stats.total}  converted: {stats.converted}  "
        f"conversion_success: {stats.conversion_success:.4f}"
        + ("  (zero-total)" if stats.zero_total else "")
    )
    for line_no, reason in stats.rejections[:20]:
        print(f"  line {line_no}: {reason}")
    if args.out:
        write_log_file(records, args.out)
        print(f"wrote {len(records)} converted records to {args.out}")
    return 0


def cmd_train_click(args) -> int:
    records, stats = load_log_file(args.logs)
    impressions = impressions_from_logs(records)
    if not impressions:
        raise GenieError("no labeled impressions in the log")
    if args.kind == "probit":
        spec = build_binning_spec(impressions, n_bins=args.bins)
        model = probit_train(impressions, spec=spec, prior=(args.prior_mu, args.prior_sigma2), beta=args.beta)
    else:
        model = gbt_train(
            impressions,
            GbtParams(
                n_trees=args.trees,
                learning_rate=args.learning_rate,
                max_depth=args.depth,
                min_samples_leaf=args.min_leaf,
            ),
        )
    save_click_model(model, args.out)
    print(f"trained {args.kind} on {len(impressions)} impressions "
          f"(conversion_success {stats.conversion_success:.4f}); model at {args.out}")
    return 0


def cmd_simulate(args) -> int:
    records, stats = load_log_file(args.logs)
    model = load_click_model(args.model)
    grid = load_grid_file(args.grid) if args.grid else []
    accuracy = replay_check(records)
    cube, errors = simulate_records(records, grid, model, tuple(args.dims), args.workers)
    cube.save(args.out)
    write_grid_file(grid, args.grid_out)
    print(
        f"simulated {len(records)} requests x {len(grid) + 1} grid points -> {args.out}\n"
        f"simulation_accuracy: {accuracy.accuracy:.4f}  conversion_success: {stats.conversion_success:.4f}"
        + (f"  errored points: {errors}" if errors else "")
    )
    return 0


def cmd_report(args) -> int:
    cube = DataCube.load(args.cube)
    settings = {gp.id: gp.setting for gp in load_grid_file(args.grid)} if args.grid else {}
    settings.setdefault(0, {})
    rows = kpi_report(cube, args.baseline_id, settings=settings)
    write_report(rows, cube.dimensions, args.out)
    print(f"wrote {len(rows)} report rows to {args.out}")
    return 0


def _parse_constraint(text: str) -> Constraint:
    # metric:bound (symmetric |delta| <= bound) or metric:lower:upper
    parts = text.split(":")
    if len(parts) == 2:
        bound = abs(float(parts[1]))
        return Constraint(metric=parts[0], lower=-bound, upper=bound)
    if len(parts) == 3:
        return Constraint(metric=parts[0], lower=float(parts[1]), upper=float(parts[2]))
    raise ConfigurationError(f"bad constraint {text!r}; use metric:bound or metric:lower:upper")


def _parse_range(text: str) -> tuple[str, tuple[float, float]]:
    parts = text.split(":")
    if len(parts) != 3:
        raise ConfigurationError(f"bad range {text!r}; use knob:min:max")
    return parts[0], (float(parts[1]), float(parts[2]))


def cmd_explore(args) -> int:
    seed = _resolve_seed(args)
    rows = read_report(args.from_report)
    direction, _, metric = args.objective.partition(":")
    if not metric:
        direction, metric = "maximize", direction
    constraints = tuple(_parse_constraint(c) for c in args.constraint)
    objective = Objective(metric=metric, direction=direction, constraints=constraints)
    metrics = sorted({objective.metric} | {c.metric for c in constraints})
    baseline_setting = dict(_load_json(args.baseline_setting)) if args.baseline_setting else None
    dims, X, dY = surrogate_dataset_from_report(
        rows, metrics=metrics, baseline_grid_id=args.baseline_id, baseline_setting=baseline_setting
    )
    ranges = dict(_parse_range(r) for r in args.range)
    params = ExploreParams(
        batches=args.batches,
        population=args.population,
        top_k=args.topk,
        objective=objective,
        dimensions=dims,
        ranges=ranges,
        seed=derive_seed(seed, "explore"),
        model_kind=args.kind,
        degree=args.degree,
        lam=args.ridge_lambda,
    )
    result = optimize(X, dY, params)
    if result.infeasible:
        print("exploration infeasible: no candidate satisfies the constraints", file=sys.stderr)
        return 1
    write_grid_file(_grid_from_settings(result.settings), args.out)
    for setting, predicted in zip(result.settings, result.predicted):
        print(f"{json.dumps(setting, sort_keys=True)} -> "
              + ", ".join(f"d_{m}={v:+.4%}" for m, v in sorted(predicted.items())))
    print(f"wrote {len(result.settings)} recommended grid points to {args.out}")
    return 0


def cmd_compare(args) -> int:
    seed = _resolve_seed(args)
    opts = _load_json(args.config) if args.config else {}
    opts.setdefault("mode", args.scenario)
    if args.rounds is not None:
        opts["rounds"] = args.rounds
    if args.seeds:
        opts["seeds"] = tuple(int(s) for s in args.seeds.split(","))
    else:
        opts.setdefault("seeds", tuple(derive_seed(seed, "compare", i) for i in range(args.n_seeds)))
    opts["seeds"] = tuple(opts["seeds"])
    if "proposals" in opts:
        opts["proposals"] = tuple(opts["proposals"])
    if args.marketplace:
        model = MarketplaceModel.load(args.marketplace)
    else:
        gen = GeneratorConfig(**_load_json(args.generator_config)) if args.generator_config else GeneratorConfig(10, 3)
        model = generate_marketplace(gen, derive_seed(seed, "marketplace"))
    result = compare_estimators(model, ScenarioConfig(**opts))
    print(result.render())
    if args.out:
        result.save(args.out)
        print(f"wrote comparison table to {args.out}")
    return 0


def cmd_run_job(args) -> int:
    config = JobConfig.from_file(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.workers is not None:
        config.workers = args.workers
    summary = run_job(config)
    print(json.dumps(summary.to_dict(), indent=1, sort_keys=True))
    return 0 if summary.ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="genie",
        description="Offline counterfactual policy estimation for sponsored-search auctions.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic marketplace and logged requests")
    p.add_argument("--generator-config", default='{"n_advertisers": 10, "n_query_classes": 3}',
                   help="GeneratorConfig JSON (inline or file path)")
    p.add_argument("--marketplace", help="existing marketplace model file (skips generation)")
    p.add_argument("--policy", help="logging policy knobs as JSON (inline or file)")
    p.add_argument("--n", type=int, default=1000, help="number of requests")
    p.add_argument("--drift-index", type=int, help="record index where the policy drifts")
    p.add_argument("--drift-policy", help="drifted policy knobs as JSON")
    p.add_argument("--seed", type=int, help="root seed (drawn and printed when omitted)")
    p.add_argument("--out", default="logs.jsonl")
    p.add_argument("--model-out", default="marketplace.json")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("ingest", help="validate and convert raw log lines")
    p.add_argument("--logs", required=True)
    p.add_argument("--out", help="optionally re-emit the converted records")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train-click", help="train a click calibration model from logs")
    p.add_argument("--logs", required=True)
    p.add_argument("--kind", choices=("probit", "gbt"), default="probit")
    p.add_argument("--out", default="click_model.json")
    p.add_argument("--beta", type=float, default=1.0, help="probit steepness")
    p.add_argument("--prior-mu", type=float, default=0.0)
    p.add_argument("--prior-sigma2", type=float, default=1.0)
    p.add_argument("--bins", type=int, default=16, help="equal-frequency bins per continuous feature")
    p.add_argument("--trees", type=int, default=100)
    p.add_argument("--learning-rate", type=float, default=0.1)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--min-leaf", type=int, default=20)
    p.set_defaults(func=cmd_train_click)

    p = sub.add_parser("simulate", help="replay logs under a counterfactual grid")
    p.add_argument("--logs", required=True)
    p.add_argument("--model", required=True, help="click model file")
    p.add_argument("--grid", help="grid file (one JSON grid point per line); baseline always included")
    p.add_argument("--dims", nargs="+", default=list(DEFAULT_DIMS))
    p.add_argument("--workers", type=int, default=default_workers())
    p.add_argument("--seed", type=int, help="unused for expected-click replay; kept for symmetry")
    p.add_argument("--out", default="cube.json")
    p.add_argument("--grid-out", default="grid.jsonl", help="where to persist the resolved grid")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="derive KPI metrics and deltas from a cube")
    p.add_argument("--cube", required=True)
    p.add_argument("--grid", help="grid file for setting provenance")
    p.add_argument("--baseline-id", type=int, default=0)
    p.add_argument("--out", default="report.tsv")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("explore", help="recommend better grid points from a report")
    p.add_argument("--from-report", required=True)
    p.add_argument("--objective", default="maximize:rpm", help="direction:metric")
    p.add_argument("--constraint", action="append", default=[],
                   help="metric:bound for |delta|<=bound, or metric:lower:upper; repeatable")
    p.add_argument("--range", action="append", required=True, help="knob:min:max; repeatable")
    p.add_argument("--batches", type=int, default=20)
    p.add_argument("--population", type=int, default=5000)
    p.add_argument("--topk", type=int, default=5)
    p.add_argument("--degree", type=int, default=3)
    p.add_argument("--kind", choices=("linear", "ridge"), default="linear")
    p.add_argument("--ridge-lambda", type=float, default=0.0)
    p.add_argument("--baseline-id", type=int, default=0)
    p.add_argument("--baseline-setting", help="knob values the logged baseline ran at (JSON)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="recommended_grid.jsonl")
    p.set_defaults(func=cmd_explore)

    p = sub.add_parser("compare", help="replay vs importance-sampling estimator comparison")
    p.add_argument("--scenario", choices=("stationary", "drift"), default="drift")
    p.add_argument("--config", help="ScenarioConfig overrides as JSON (inline or file)")
    p.add_argument("--marketplace", help="marketplace model file")
    p.add_argument("--generator-config", help="GeneratorConfig JSON when no model file given")
    p.add_argument("--rounds", type=int)
    p.add_argument("--seeds", help="comma-separated replication seeds")
    p.add_argument("--n-seeds", type=int, default=3)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("run-job", help="run a full pipeline from a job config file")
    p.add_argument("config")
    p.add_argument("--seed", type=int, help="override the config's root seed")
    p.add_argument("--workers", type=int, help="override worker count (default: GENIE_WORKERS)")
    p.set_defaults(func=cmd_run_job)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return 2
    except GenieError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
