"""Command-line harness.

Subcommands wrap one library entry point each:

  generate        build a synthetic scenario document
  validate        check a scenario document, listing violations
  simulate        one seeded run under one dispatcher, with KPI output
  fit-normalizer  collect feature statistics from a heuristic reference run
  train-ssl       pretext-train the tool-family encoding
  train-nes       evolution-strategies training of the policy network
  evaluate        multi-seed paired benchmark across dispatchers
  report          re-render report files from a per-seed details.csv

Exit codes: 0 success, 1 runtime failure, 2 validation or usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
import zipfile
from pathlib import Path

from . import bench, nes, net, objective, pretext, sim
from .dispatch import RULE_NAMES, make_dispatcher
from .features import Normalizer, fit_normalizer
from .scenario import (
    MINUTES_PER_DAY,
    GeneratorConfig,
    ScenarioError,
    ScenarioValidationError,
    generate_minifab,
    load_scenario,
    save_scenario,
    validate,
)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_VALIDATION = 2


class UsageError(Exception):
    pass


def _horizon_minutes(days: float) -> int:
    return round(days * MINUTES_PER_DAY)


def _load(path: str):
    try:
        return load_scenario(path)
    except ScenarioError:
        raise
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from exc


def _kpi_dict(report: objective.KpiReport) -> dict:
    return {
        "cost": report.cost,
        "finished_cost": report.finished_component,
        "wip_cost": report.wip_component,
        "cqt_violations": report.cqt_violations,
        "finished": report.finished_count,
        "wip": report.wip_count,
        "types": [
            {
                "lot_type": bench.lot_type_label(r.product_id, int(r.priority)),
                "count": r.count,
                "on_time_pct": r.on_time_pct,
                "cycle_days": r.mean_cycle_days,
            }
            for r in report.rows
        ],
    }


def _print_kpis(report: objective.KpiReport, as_json: bool) -> None:
    if as_json:
        print(json.dumps(_kpi_dict(report), indent=2))
        return
    print(f"cost      {report.cost:.3f}  (finished {report.finished_component:.3f}"
          f" + wip {report.wip_component:.3f})")
    print(f"finished  {report.finished_count}   wip {report.wip_count}"
          f"   cqt violations {report.cqt_violations}")
    for r in report.rows:
        label = bench.lot_type_label(r.product_id, int(r.priority))
        if r.count == 0:
            print(f"  {label:<16} count 0")
        else:
            print(f"  {label:<16} count {r.count:<5} on-time {r.on_time_pct:6.2f}%"
                  f"  cycle {r.mean_cycle_days:7.2f} d")


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = GeneratorConfig(
        families=args.families,
        groups_per_family=args.groups_per_family,
        products=args.products,
        route_length=args.route_length,
        seed=args.seed,
    )
    try:
        scenario = generate_minifab(cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    save_scenario(scenario, args.out)
    print(f"wrote {args.out} ({len(scenario.tool_groups)} groups, "
          f"{len(scenario.products)} products)")
    return EXIT_OK


def cmd_validate(args) -> int:
    try:
        scenario = _load(args.scenario)
    except ScenarioValidationError as exc:
        for violation in exc.violations:
            print(violation, file=sys.stderr)
        return EXIT_VALIDATION
    except ScenarioError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_VALIDATION
    violations = validate(scenario)
    if violations:
        for violation in violations:
            print(violation, file=sys.stderr)
        return EXIT_VALIDATION
    print(f"{args.scenario}: valid")
    return EXIT_OK


def cmd_simulate(args) -> int:
    scenario = _load(args.scenario)
    dispatcher = make_dispatcher(args.dispatcher)
    horizon = _horizon_minutes(args.horizon_days)
    final = sim.run(
        scenario,
        args.seed,
        dispatcher,
        horizon,
        initial_wip=args.initial_wip,
        trace_enabled=args.trace_out is not None,
    )
    if args.trace_out:
        count = sim.write_trace(final, args.trace_out)
        print(f"wrote {count} trace records to {args.trace_out}", file=sys.stderr)
    _print_kpis(objective.kpis(final), args.json)
    return EXIT_OK


def cmd_fit_normalizer(args) -> int:
    scenario = _load(args.scenario)
    dispatcher = make_dispatcher(args.dispatcher)
    normalizer = fit_normalizer(
        scenario,
        dispatcher,
        horizon=_horizon_minutes(args.horizon_days),
        seed=args.seed,
        initial_wip=args.initial_wip,
        dispatcher_name=args.dispatcher,
    )
    normalizer.save(args.out)
    print(f"wrote {args.out} ({normalizer.sample_count} samples)")
    return EXIT_OK


def _normalizer_meta(normalizer: Normalizer) -> dict:
    return {
        "mean": normalizer.mean.tolist(),
        "std": normalizer.std.tolist(),
        "sample_count": normalizer.sample_count,
        "source_seed": normalizer.source_seed,
        "dispatcher_name": normalizer.dispatcher_name,
    }


def _normalizer_from_meta(doc: dict) -> Normalizer:
    import numpy as np

    return Normalizer(
        mean=np.array(doc["mean"]),
        std=np.array(doc["std"]),
        sample_count=doc["sample_count"],
        source_seed=doc["source_seed"],
        dispatcher_name=doc.get("dispatcher_name", ""),
    )


def cmd_train_ssl(args) -> int:
    scenario = _load(args.scenario)
    dispatcher = make_dispatcher(args.dispatcher)
    horizon = _horizon_minutes(args.horizon_days)
    if args.normalizer:
        normalizer = Normalizer.load(args.normalizer)
    else:
        normalizer = fit_normalizer(
            scenario, dispatcher, horizon=horizon, seed=args.seed,
            initial_wip=args.initial_wip, dispatcher_name=args.dispatcher,
        )

    dataset = None
    cache_path = None
    if args.cache_dir:
        key = pretext.dataset_cache_key(scenario, args.dispatcher, horizon, args.seed)
        cache_path = Path(args.cache_dir) / f"pretext_{key}.npz"
        if cache_path.exists():
            dataset = pretext.load_dataset(cache_path)
            print(f"loaded cached dataset {cache_path}", file=sys.stderr)
    if dataset is None:
        dataset = pretext.collect_dataset(
            scenario, dispatcher, normalizer, horizon=horizon, seed=args.seed,
            initial_wip=args.initial_wip, dispatcher_name=args.dispatcher,
        )
        if cache_path is not None:
            cache_path.parent.mkdir(parents=True, exist_ok=True)
            pretext.save_dataset(dataset, cache_path)

    params = net.init_params(args.seed, scenario.family_count)
    cfg = pretext.SslConfig(
        weight_decay=args.weight_decay,
        learning_rate=args.lr,
        max_epochs=args.epochs,
        seed=args.seed,
    )
    result = pretext.train_pretext(dataset, params, cfg)
    accuracy = pretext.pretext_accuracy(result.pretext_params, dataset)
    net.save_params(
        args.out,
        result.params,
        meta={
            "phase": "ssl",
            "train_seed": args.seed,
            "normalizer": _normalizer_meta(normalizer),
            "pretext_epochs": len(result.history),
            "pretext_accuracy": accuracy,
        },
    )
    print(f"wrote {args.out} ({len(result.history)} epochs, "
          f"encoding accuracy {accuracy:.3f} on the training run)")
    return EXIT_OK


def cmd_train_nes(args) -> int:
    scenario = _load(args.scenario)
    params, meta = net.load_params(args.ssl_params)
    if args.normalizer:
        normalizer = Normalizer.load(args.normalizer)
    elif meta.get("normalizer"):
        normalizer = _normalizer_from_meta(meta["normalizer"])
    else:
        raise UsageError("no normalizer: pass --normalizer or use train-ssl output")
    cfg = nes.NesConfig(
        population=args.population,
        sigma=args.sigma,
        max_iterations=args.iterations,
        horizon=_horizon_minutes(args.horizon_days),
        initial_wip=args.initial_wip,
        workers=args.workers,
    )
    map_fn = None
    pool = None
    if args.workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        pool = ProcessPoolExecutor(max_workers=args.workers)
        map_fn = pool.map
    try:
        result = nes.train(
            scenario, params, normalizer, cfg,
            master_seed=args.seed,
            checkpoint_dir=args.checkpoint_dir,
            map_fn=map_fn,
        )
    finally:
        if pool is not None:
            pool.shutdown()
    net.save_params(
        args.out,
        result.params,
        meta={
            "phase": "nes",
            "train_seed": args.seed,
            "normalizer": meta.get("normalizer") or _normalizer_meta(normalizer),
            "iterations": len(result.history),
        },
    )
    if args.history_out:
        nes.write_history_csv(result.history, args.history_out)
    final_cost = result.history[-1]["center_cost"] if result.history else None
    print(f"wrote {args.out} ({len(result.history)} iterations,"
          f" final center cost {final_cost})")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    dispatchers = tuple(name.strip() for name in args.dispatchers.split(",") if name.strip())
    if not dispatchers:
        raise UsageError("--dispatchers must name at least one dispatcher")
    for name in dispatchers:
        try:
            make_dispatcher(name)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        except OSError as exc:
            raise UsageError(f"cannot load dispatcher {name!r}: {exc}") from exc
    scenario = _load(args.scenario)
    cfg = bench.BenchmarkConfig(
        scenario_path=args.scenario,
        dispatchers=dispatchers,
        seed_count=args.seeds,
        base_seed=args.base_seed,
        horizon=_horizon_minutes(args.horizon_days),
        initial_wip=args.initial_wip,
        workers=args.workers,
    )
    report = bench.run_benchmark(cfg, scenario=scenario)
    paths = bench.write_report(report, args.out_dir)
    if args.json:
        print(json.dumps({"cost": report.cost_rows, "files": [str(p) for p in paths]}, indent=2))
    else:
        print(bench.format_table(report))
        print(f"report files in {args.out_dir}")
    return EXIT_OK


def cmd_report(args) -> int:
    detail_rows = bench.read_details_csv(args.details)
    kpi_rows, cost_rows = bench.aggregate_details(detail_rows)
    report = bench.AggregateReport(
        kpi_rows=kpi_rows, cost_rows=cost_rows, detail_rows=detail_rows
    )
    if args.out_dir:
        bench.write_report(report, args.out_dir)
    if args.json:
        print(json.dumps({"cost": cost_rows}, indent=2))
    else:
        print(bench.format_table(report))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fabsched", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, horizon_default: float):
        p.add_argument("--scenario", required=True, help="scenario JSON path")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--horizon-days", type=float, default=horizon_default)
        p.add_argument("--initial-wip", type=int, default=0)
        p.add_argument("--json", action="store_true", help="structured output")

    p = sub.add_parser("generate", help="generate a synthetic scenario")
    p.add_argument("--families", type=int, default=4)
    p.add_argument("--groups-per-family", type=int, default=2)
    p.add_argument("--products", type=int, default=3)
    p.add_argument("--route-length", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("validate", help="validate a scenario document")
    p.add_argument("--scenario", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("simulate", help="run one seeded simulation")
    common(p, horizon_default=30)
    p.add_argument("--dispatcher", default="fifo",
                   help=f"{', '.join(RULE_NAMES)}, or agent:<params-path>")
    p.add_argument("--trace-out", help="write line-delimited trace records here")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit-normalizer", help="fit feature statistics from a reference run")
    common(p, horizon_default=60)
    p.add_argument("--dispatcher", default="cr")
    p.add_argument("--out", required=True, help="normalizer JSON path")
    p.set_defaults(func=cmd_fit_normalizer)

    p = sub.add_parser("train-ssl", help="pretext-train the tool-family encoding")
    common(p, horizon_default=60)
    p.add_argument("--dispatcher", default="cr")
    p.add_argument("--normalizer", help="existing normalizer JSON (fitted when absent)")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--weight-decay", type=float, default=0.2)
    p.add_argument("--cache-dir", help="dataset cache directory")
    p.add_argument("--out", required=True, help="params file path (.npz)")
    p.set_defaults(func=cmd_train_ssl)

    p = sub.add_parser("train-nes", help="evolution-strategies policy training")
    common(p, horizon_default=180)
    p.add_argument("--ssl-params", required=True, help="params file from train-ssl")
    p.add_argument("--normalizer", help="normalizer JSON (default: embedded in params)")
    p.add_argument("--population", type=int, default=64)
    p.add_argument("--sigma", type=float, default=0.005)
    p.add_argument("--iterations", type=int, default=40)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--checkpoint-dir", help="write per-iteration checkpoints here")
    p.add_argument("--history-out", help="write the training history CSV here")
    p.add_argument("--out", required=True, help="trained params file path (.npz)")
    p.set_defaults(func=cmd_train_nes)

    p = sub.add_parser("evaluate", help="multi-seed paired benchmark")
    common(p, horizon_default=180)
    p.add_argument("--dispatchers", required=True,
                   help="comma-separated dispatcher names (see simulate --dispatcher)")
    p.add_argument("--seeds", type=int, default=20, help="number of seeds per dispatcher")
    p.add_argument("--base-seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="re-render reports from a details.csv")
    p.add_argument("--details", required=True, help="details.csv from evaluate")
    p.add_argument("--out-dir")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ScenarioValidationError as exc:
        for violation in exc.violations:
            print(violation, file=sys.stderr)
        return EXIT_VALIDATION
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, RuntimeError, zipfile.BadZipFile, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
