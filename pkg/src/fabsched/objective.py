"""Schedule scoring: weighted tardiness of finished lots plus a forecast
penalty for work-in-progress, and the per-lot-type KPI report.

The two cost terms are pure functions over small records and are agnostic to
the time unit (all quantities must simply share one). The state adapters
convert simulator minutes to days before scoring, so the penalty constant is
commensurate with day-scale tardiness.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

from .scenario import MINUTES_PER_DAY, PriorityClass, PriorityWeights, Scenario
from .sim import FabState, Lot, lot_remaining_minutes

# a lot type is the (product, priority class) pair
TypeKey = tuple[int, int]


@dataclass(frozen=True)
class ObjectiveConfig:
    penalty: float = 10.0
    priority_weights: PriorityWeights = PriorityWeights()

    @classmethod
    def from_scenario(cls, s: Scenario) -> "ObjectiveConfig":
        return cls(penalty=s.penalty, priority_weights=s.priority_weights)


@dataclass(frozen=True)
class FinishedRecord:
    type_key: TypeKey
    weight: float
    completion: float
    due: float


@dataclass(frozen=True)
class WipRecord:
    type_key: TypeKey
    weight: float
    due: float
    remaining_work: float


def finished_cost(finished: list[FinishedRecord], cfg: ObjectiveConfig) -> float:
    """Per type, the mean of w*(p + tardiness) over its lots (0 for on-time
    lots), summed over all types with at least one finished lot."""
    if cfg.penalty <= 0:
        raise ValueError("penalty must be positive")
    by_type: dict[TypeKey, list[FinishedRecord]] = defaultdict(list)
    for rec in finished:
        if rec.completion is None:
            raise ValueError(f"finished lot of type {rec.type_key} has no completion time")
        by_type[rec.type_key].append(rec)
    total = 0.0
    for records in by_type.values():
        acc = 0.0
        for rec in records:
            if rec.completion > rec.due:
                acc += rec.weight * (cfg.penalty + (rec.completion - rec.due))
        total += acc / len(records)
    return total


def wip_cost(
    wip: list[WipRecord],
    t: float,
    avg_cycle: dict[TypeKey, float],
    cfg: ObjectiveConfig,
) -> float:
    """Per type, the mean of w*x over WIP lots, where x penalizes lots whose
    forecast start-of-lateness d - a_i*e is already in the past."""
    by_type: dict[TypeKey, list[WipRecord]] = defaultdict(list)
    for rec in wip:
        by_type[rec.type_key].append(rec)
    total = 0.0
    for type_key, records in by_type.items():
        a_i = avg_cycle[type_key]
        acc = 0.0
        for rec in records:
            forecast = rec.due - a_i * rec.remaining_work
            if forecast < t:
                acc += rec.weight * (cfg.penalty + (t - forecast))
        total += acc / len(records)
    return total


# ---------------------------------------------------------------------------
# Simulator-state adapters (minutes -> days)
# ---------------------------------------------------------------------------


def _type_key(lot: Lot) -> TypeKey:
    return (lot.product_id, int(lot.priority))


def cycle_stretch_factors(st: FabState) -> dict[TypeKey, float]:
    """Empirical ratio of realized cycle time to raw processing time per lot
    type; types with no finished lots fall back to their product flow factor."""
    sums: dict[TypeKey, list[float]] = defaultdict(list)
    for lot in st.finished:
        raw = st.scenario.product(lot.product_id).raw_process_minutes
        sums[_type_key(lot)].append((lot.completion_time - lot.release_time) / max(raw, 1))
    factors: dict[TypeKey, float] = {}
    for p in st.scenario.products:
        for priority in PriorityClass:
            key = (p.product_id, int(priority))
            samples = sums.get(key)
            factors[key] = sum(samples) / len(samples) if samples else p.flow_factor
    return factors


def finished_records(st: FabState, cfg: ObjectiveConfig | None = None) -> list[FinishedRecord]:
    weights = (cfg or ObjectiveConfig.from_scenario(st.scenario)).priority_weights
    return [
        FinishedRecord(
            type_key=_type_key(lot),
            weight=weights.weight(lot.priority),
            completion=lot.completion_time / MINUTES_PER_DAY,
            due=lot.due_date / MINUTES_PER_DAY,
        )
        for lot in st.finished
    ]


def wip_records(st: FabState, cfg: ObjectiveConfig | None = None) -> list[WipRecord]:
    weights = (cfg or ObjectiveConfig.from_scenario(st.scenario)).priority_weights
    return [
        WipRecord(
            type_key=_type_key(lot),
            weight=weights.weight(lot.priority),
            due=lot.due_date / MINUTES_PER_DAY,
            remaining_work=lot_remaining_minutes(st, lot) / MINUTES_PER_DAY,
        )
        for lot in st.lots.values()
    ]


def total_cost(st: FabState, cfg: ObjectiveConfig | None = None) -> float:
    """Finished cost plus WIP cost of a simulator state at its current clock."""
    cfg = cfg or ObjectiveConfig.from_scenario(st.scenario)
    o_f = finished_cost(finished_records(st, cfg), cfg)
    o_p = wip_cost(
        wip_records(st, cfg), st.clock / MINUTES_PER_DAY, cycle_stretch_factors(st), cfg
    )
    return o_f + o_p


# ---------------------------------------------------------------------------
# KPI report
# ---------------------------------------------------------------------------


@dataclass
class TypeKpi:
    product_id: int
    priority: PriorityClass
    count: int
    on_time_pct: float | None
    mean_cycle_days: float | None
    avg_cycle_stretch: float | None


@dataclass
class KpiReport:
    rows: list[TypeKpi] = field(default_factory=list)
    cost: float = 0.0
    finished_component: float = 0.0
    wip_component: float = 0.0
    cqt_violations: int = 0
    finished_count: int = 0
    wip_count: int = 0

    def row(self, product_id: int, priority: PriorityClass) -> TypeKpi:
        for r in self.rows:
            if r.product_id == product_id and r.priority == priority:
                return r
        raise KeyError((product_id, priority))


def kpis(st: FabState, cfg: ObjectiveConfig | None = None) -> KpiReport:
    """Per-type on-time percentage and mean cycle time (days), plus the cost
    breakdown of the final state."""
    cfg = cfg or ObjectiveConfig.from_scenario(st.scenario)
    by_type: dict[TypeKey, list[Lot]] = defaultdict(list)
    for lot in st.finished:
        by_type[_type_key(lot)].append(lot)

    stretch = cycle_stretch_factors(st)
    rows = []
    for p in st.scenario.products:
        for priority in PriorityClass:
            key = (p.product_id, int(priority))
            lots = by_type.get(key, [])
            if lots:
                on_time = sum(1 for lot in lots if lot.completion_time <= lot.due_date)
                cycles = [
                    (lot.completion_time - lot.release_time) / MINUTES_PER_DAY for lot in lots
                ]
                rows.append(
                    TypeKpi(
                        product_id=p.product_id,
                        priority=priority,
                        count=len(lots),
                        on_time_pct=100.0 * on_time / len(lots),
                        mean_cycle_days=sum(cycles) / len(cycles),
                        avg_cycle_stretch=stretch[key],
                    )
                )
            else:
                rows.append(
                    TypeKpi(
                        product_id=p.product_id,
                        priority=priority,
                        count=0,
                        on_time_pct=None,
                        mean_cycle_days=None,
                        avg_cycle_stretch=None,
                    )
                )

    o_f = finished_cost(finished_records(st, cfg), cfg)
    o_p = wip_cost(wip_records(st, cfg), st.clock / MINUTES_PER_DAY, stretch, cfg)
    return KpiReport(
        rows=rows,
        cost=o_f + o_p,
        finished_component=o_f,
        wip_component=o_p,
        cqt_violations=st.cqt_violations,
        finished_count=len(st.finished),
        wip_count=len(st.lots),
    )
