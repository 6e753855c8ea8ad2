"""Multi-seed benchmark harness and report files.

Runs every requested dispatcher over the same seed list (paired comparison),
collects per-seed KPIs, cost breakdowns and per-decision dispatcher latency,
and aggregates them into the report files: per-type KPI means/stds, per-
dispatcher cost, a per-seed detail file the aggregation can be recomputed
from, and a human-readable table grouped by priority class.
"""

from __future__ import annotations

import csv
import json
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import objective, sim
from .dispatch import make_dispatcher
from .scenario import MINUTES_PER_DAY, PriorityClass, Scenario, load_scenario

KPI_FIELDS = ("dispatcher", "lot_type", "on_time_mean", "on_time_std", "cycle_mean", "cycle_std", "count")
COST_FIELDS = ("dispatcher", "cost_mean", "cost_std", "finished_mean", "wip_mean", "overhead_ms_median")
DETAIL_FIELDS = (
    "dispatcher", "seed", "product_id", "priority", "count", "on_time_pct", "cycle_days",
    "cost", "finished_cost", "wip_cost", "cqt_violations", "overhead_ms",
)


@dataclass(frozen=True)
class BenchmarkConfig:
    scenario_path: str
    dispatchers: tuple[str, ...]
    seed_count: int = 100
    base_seed: int = 0
    horizon: int = 180 * MINUTES_PER_DAY
    initial_wip: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.seed_count < 1:
            raise ValueError("seed_count must be >= 1")

    @property
    def seeds(self) -> tuple[int, ...]:
        return tuple(self.base_seed + i for i in range(self.seed_count))


@dataclass
class AggregateReport:
    kpi_rows: list[dict] = field(default_factory=list)
    cost_rows: list[dict] = field(default_factory=list)
    detail_rows: list[dict] = field(default_factory=list)
    seeds: tuple[int, ...] = ()
    horizon: int = 0
    seed_lists: dict[str, tuple[int, ...]] = field(default_factory=dict)


class _TimedDispatcher:
    """Wraps a dispatcher, recording wall-clock seconds per decision call."""

    def __init__(self, inner):
        self.inner = inner
        self.call_seconds: list[float] = []

    def __call__(self, st, legal):
        start = time.perf_counter()
        result = self.inner(st, legal)
        self.call_seconds.append(time.perf_counter() - start)
        return result


def lot_type_label(product_id: int, priority: int) -> str:
    return f"{PriorityClass(priority).key}_{product_id}"


def _run_cell(args) -> list[dict]:
    scenario, dispatcher_name, seed, horizon, initial_wip = args
    dispatcher = _TimedDispatcher(make_dispatcher(dispatcher_name))
    final = sim.run(
        scenario, seed, dispatcher, horizon, initial_wip=initial_wip, trace_enabled=False
    )
    report = objective.kpis(final)
    overhead_ms = (
        1000.0 * statistics.median(dispatcher.call_seconds) if dispatcher.call_seconds else 0.0
    )
    rows = []
    for row in report.rows:
        rows.append(
            {
                "dispatcher": dispatcher_name,
                "seed": seed,
                "product_id": row.product_id,
                "priority": int(row.priority),
                "count": row.count,
                "on_time_pct": row.on_time_pct,
                "cycle_days": row.mean_cycle_days,
                "cost": report.cost,
                "finished_cost": report.finished_component,
                "wip_cost": report.wip_component,
                "cqt_violations": report.cqt_violations,
                "overhead_ms": overhead_ms,
            }
        )
    return rows


def _population_std(values: list[float]) -> float:
    if len(values) <= 1:
        return 0.0
    return statistics.pstdev(values)


def aggregate_details(detail_rows: list[dict]) -> tuple[list[dict], list[dict]]:
    """Recompute the per-type and per-dispatcher aggregates from detail rows;
    write_report and the `report` subcommand both go through this."""
    by_type: dict[tuple[str, int, int], list[dict]] = {}
    by_dispatcher: dict[str, dict[int, dict]] = {}
    for row in detail_rows:
        key = (row["dispatcher"], int(row["product_id"]), int(row["priority"]))
        by_type.setdefault(key, []).append(row)
        by_dispatcher.setdefault(row["dispatcher"], {})[int(row["seed"])] = row

    kpi_rows = []
    for (dispatcher, product_id, priority), rows in sorted(by_type.items()):
        on_time = [float(r["on_time_pct"]) for r in rows if r["on_time_pct"] not in (None, "")]
        cycles = [float(r["cycle_days"]) for r in rows if r["cycle_days"] not in (None, "")]
        kpi_rows.append(
            {
                "dispatcher": dispatcher,
                "lot_type": lot_type_label(product_id, priority),
                "on_time_mean": sum(on_time) / len(on_time) if on_time else None,
                "on_time_std": _population_std(on_time) if on_time else None,
                "cycle_mean": sum(cycles) / len(cycles) if cycles else None,
                "cycle_std": _population_std(cycles) if cycles else None,
                "count": sum(int(r["count"]) for r in rows),
            }
        )

    cost_rows = []
    for dispatcher, per_seed in sorted(by_dispatcher.items()):
        costs = [float(r["cost"]) for r in per_seed.values()]
        finished = [float(r["finished_cost"]) for r in per_seed.values()]
        wip = [float(r["wip_cost"]) for r in per_seed.values()]
        overhead = [float(r["overhead_ms"]) for r in per_seed.values()]
        cost_rows.append(
            {
                "dispatcher": dispatcher,
                "cost_mean": sum(costs) / len(costs),
                "cost_std": _population_std(costs),
                "finished_mean": sum(finished) / len(finished),
                "wip_mean": sum(wip) / len(wip),
                "overhead_ms_median": statistics.median(overhead),
            }
        )
    return kpi_rows, cost_rows


def run_benchmark(cfg: BenchmarkConfig, scenario: Scenario | None = None) -> AggregateReport:
    """Run (dispatcher, seed) cells — in parallel when cfg.workers > 1 — and
    aggregate. Every dispatcher sees the identical seed list."""
    if scenario is None:
        scenario = load_scenario(cfg.scenario_path)
    for name in cfg.dispatchers:
        make_dispatcher(name)  # fail fast on unknown names / missing files
    seeds = cfg.seeds
    tasks = [
        (scenario, name, seed, cfg.horizon, cfg.initial_wip)
        for name in cfg.dispatchers
        for seed in seeds
    ]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_cell, tasks))
    else:
        results = [_run_cell(task) for task in tasks]

    detail_rows = [row for cell in results for row in cell]
    kpi_rows, cost_rows = aggregate_details(detail_rows)
    return AggregateReport(
        kpi_rows=kpi_rows,
        cost_rows=cost_rows,
        detail_rows=detail_rows,
        seeds=seeds,
        horizon=cfg.horizon,
        seed_lists={name: seeds for name in cfg.dispatchers},
    )


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------


def _write_csv(path: Path, fields, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fields))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in fields})


def read_details_csv(path: str | Path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            for key in ("on_time_pct", "cycle_days"):
                row[key] = None if row[key] == "" else float(row[key])
            rows.append(row)
    return rows


def format_table(report: AggregateReport) -> str:
    """Human-readable table: priority-class rows with per-product sub-rows,
    one column pair per dispatcher, cost row at the bottom."""
    dispatchers = [r["dispatcher"] for r in report.cost_rows]
    lines = []
    header = f"{'Lot type':<24}{'Metric':<12}" + "".join(f"{d:>24}" for d in dispatchers)
    lines.append(header)
    lines.append("-" * len(header))
    kpi_by_key = {(r["dispatcher"], r["lot_type"]): r for r in report.kpi_rows}
    lot_types = sorted(
        {r["lot_type"] for r in report.kpi_rows},
        key=lambda lt: (-_priority_of_label(lt), lt),
    )
    for lot_type in lot_types:
        on_time_cells = []
        cycle_cells = []
        for d in dispatchers:
            row = kpi_by_key.get((d, lot_type))
            if row is None or row["on_time_mean"] is None:
                on_time_cells.append(f"{'-':>24}")
                cycle_cells.append(f"{'-':>24}")
            else:
                on_time_cells.append(f"{row['on_time_mean']:>15.2f}% ± {row['on_time_std']:<5.2f}")
                cycle_cells.append(f"{row['cycle_mean']:>16.2f} ± {row['cycle_std']:<5.2f}")
        lines.append(f"{lot_type:<24}{'on-time':<12}" + "".join(on_time_cells))
        lines.append(f"{'':<24}{'cycle (d)':<12}" + "".join(cycle_cells))
    lines.append("-" * len(header))
    cost_cells = "".join(
        f"{r['cost_mean']:>16.2f} ± {r['cost_std']:<5.2f}" for r in report.cost_rows
    )
    lines.append(f"{'Cost':<24}{'':<12}" + cost_cells)
    return "\n".join(lines) + "\n"


def _priority_of_label(lot_type: str) -> int:
    name = lot_type.rsplit("_", 1)[0]
    return {"regular": 0, "hot": 1, "super_hot": 2}[name]


def write_report(report: AggregateReport, out_dir: str | Path) -> list[Path]:
    """Emit kpis.csv, cost.csv, details.csv, table.txt and summary.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    kpis_path = out / "kpis.csv"
    _write_csv(kpis_path, KPI_FIELDS, report.kpi_rows)
    paths.append(kpis_path)
    cost_path = out / "cost.csv"
    _write_csv(cost_path, COST_FIELDS, report.cost_rows)
    paths.append(cost_path)
    details_path = out / "details.csv"
    _write_csv(details_path, DETAIL_FIELDS, report.detail_rows)
    paths.append(details_path)
    table_path = out / "table.txt"
    table_path.write_text(format_table(report))
    paths.append(table_path)
    summary_path = out / "summary.json"
    summary_path.write_text(
        json.dumps(
            {
                "seeds": list(report.seeds),
                "horizon_minutes": report.horizon,
                "cost": report.cost_rows,
            },
            indent=2,
        )
        + "\n"
    )
    paths.append(summary_path)
    return paths
