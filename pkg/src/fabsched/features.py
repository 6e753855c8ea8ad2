"""Per-lot feature extraction and reference-trace normalization.

Each dispatchable lot is summarized by 12 numeric features plus the tool
family index of its current operation. The numeric features are standardized
with statistics collected once from a heuristic reference run (a fixed
"virtual batch" of states gathered before any training); the family index is
an embedding key and passes through untouched.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import sim
from .scenario import Scenario
from .sim import Dispatcher, FabState, MachineStatus

STD_FLOOR = 1e-6
NUMERIC_FEATURES = 12


@dataclass(frozen=True)
class LotFeatures:
    critical_ratio: float
    time_to_deadline: float
    total_wait: float
    wait_since_last_op: float
    remaining_dedications: int
    priority_weight: float
    remaining_work: float
    min_setup_time: float
    current_proc_time: float
    compatible_idle_machines: int
    batch_min: int
    batch_max: int
    family_index: int

    def vector(self) -> np.ndarray:
        return np.array(
            [
                self.critical_ratio,
                self.time_to_deadline,
                self.total_wait,
                self.wait_since_last_op,
                self.remaining_dedications,
                self.priority_weight,
                self.remaining_work,
                self.min_setup_time,
                self.current_proc_time,
                self.compatible_idle_machines,
                self.batch_min,
                self.batch_max,
            ],
            dtype=np.float64,
        )


def extract(st: FabState, lot_id: int) -> LotFeatures:
    """Compute the feature record of a currently dispatchable lot."""
    lot = st.lots[lot_id]
    if lot.queue_entry_time is None:
        raise ValueError(f"lot {lot_id} is not waiting for dispatch")
    step = st.lot_step(lot)
    group = st.scenario.group(step.group_id)
    t = st.clock
    remaining = sim.lot_remaining_minutes(st, lot)
    route = st.scenario.product(lot.product_id).route
    remaining_dedications = sum(
        1 for s in route[lot.step_index:] if s.dedication == "reuse"
    )

    idle = [m for m in st.machines_by_group[group.group_id] if m.status == MachineStatus.IDLE]
    if step.setup_id is None or group.setups is None:
        min_setup = 0
        compatible_idle = len(idle)
    else:
        costs = [sim._setup_minutes(group, m, step) for m in idle]
        min_setup = min(costs) if costs else 0
        compatible_idle = sum(1 for c in costs if c == 0)

    wait_here = t - lot.queue_entry_time
    return LotFeatures(
        critical_ratio=(lot.due_date - t) / max(remaining, 1),
        time_to_deadline=lot.due_date - t,
        total_wait=lot.total_wait + wait_here,
        wait_since_last_op=wait_here,
        remaining_dedications=remaining_dedications,
        priority_weight=sim.lot_weight(st, lot),
        remaining_work=remaining,
        min_setup_time=min_setup,
        current_proc_time=step.mean_proc_time,
        compatible_idle_machines=compatible_idle,
        batch_min=group.batch_min,
        batch_max=group.batch_max,
        family_index=group.family_id,
    )


def extract_matrix(st: FabState, lot_ids) -> tuple[np.ndarray, np.ndarray]:
    """Feature rows and family indices for a set of lots, in the given order.

    Hot path for dispatchers: same arithmetic as extract(), written straight
    into the output array (extract() allocates a record per lot).
    """
    n = len(lot_ids)
    x = np.empty((n, NUMERIC_FEATURES), dtype=np.float64)
    fam = np.empty(n, dtype=np.int64)
    t = st.clock
    weights = st.scenario.priority_weights
    setup_cache: dict[int, list[MachineState]] = {}
    for row, lot_id in enumerate(lot_ids):
        lot = st.lots[lot_id]
        product = st.scenario.product(lot.product_id)
        step = product.route[lot.step_index]
        group = st.scenario.group(step.group_id)
        remaining = st.scenario.remaining_work(lot.product_id, lot.step_index)
        idle = setup_cache.get(group.group_id)
        if idle is None:
            idle = [
                m
                for m in st.machines_by_group[group.group_id]
                if m.status == MachineStatus.IDLE
            ]
            setup_cache[group.group_id] = idle
        if step.setup_id is None or group.setups is None:
            min_setup = 0.0
            compatible_idle = len(idle)
        else:
            costs = [sim._setup_minutes(group, m, step) for m in idle]
            min_setup = min(costs) if costs else 0.0
            compatible_idle = sum(1 for c in costs if c == 0)
        wait_here = t - lot.queue_entry_time
        route = product.route
        x[row, 0] = (lot.due_date - t) / max(remaining, 1)
        x[row, 1] = lot.due_date - t
        x[row, 2] = lot.total_wait + wait_here
        x[row, 3] = wait_here
        x[row, 4] = sum(1 for s in route[lot.step_index:] if s.dedication == "reuse")
        x[row, 5] = weights.weight(lot.priority)
        x[row, 6] = remaining
        x[row, 7] = min_setup
        x[row, 8] = step.mean_proc_time
        x[row, 9] = compatible_idle
        x[row, 10] = group.batch_min
        x[row, 11] = group.batch_max
        fam[row] = group.family_id
    return x, fam


@dataclass
class Normalizer:
    """Per-feature affine standardization fitted on a reference trace."""

    mean: np.ndarray
    std: np.ndarray
    sample_count: int
    source_seed: int
    dispatcher_name: str = ""

    def normalize(self, fs: LotFeatures) -> tuple[np.ndarray, int]:
        return (fs.vector() - self.mean) / self.std, fs.family_index

    def normalize_matrix(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def save(self, path: str | Path) -> None:
        doc = {
            "schema_version": 1,
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "sample_count": self.sample_count,
            "source_seed": self.source_seed,
            "dispatcher_name": self.dispatcher_name,
        }
        Path(path).write_text(json.dumps(doc, indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Normalizer":
        doc = json.loads(Path(path).read_text())
        return cls(
            mean=np.array(doc["mean"], dtype=np.float64),
            std=np.array(doc["std"], dtype=np.float64),
            sample_count=doc["sample_count"],
            source_seed=doc["source_seed"],
            dispatcher_name=doc.get("dispatcher_name", ""),
        )


class StreamingMoments:
    """Single-pass per-component mean/variance (Welford)."""

    def __init__(self, dim: int):
        self.count = 0
        self.mean = np.zeros(dim)
        self._m2 = np.zeros(dim)

    def add(self, x: np.ndarray) -> None:
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self._m2 += delta * (x - self.mean)

    def add_matrix(self, rows: np.ndarray) -> None:
        for row in rows:
            self.add(row)

    def population_std(self) -> np.ndarray:
        if self.count == 0:
            raise ValueError("no samples")
        return np.sqrt(self._m2 / self.count)


class FeatureCollector:
    """Dispatcher wrapper that records every legal lot's features, then defers
    the actual ordering to the wrapped dispatcher."""

    def __init__(self, inner: Dispatcher):
        self.inner = inner
        self.moments = StreamingMoments(NUMERIC_FEATURES)

    def __call__(self, st: FabState, legal):
        x, _ = extract_matrix(st, legal)
        self.moments.add_matrix(x)
        return self.inner(st, legal)


TWO_MONTHS_MINUTES = 60 * 1440


def fit_normalizer(
    s: Scenario,
    heuristic: Dispatcher,
    horizon: int = TWO_MONTHS_MINUTES,
    seed: int = 0,
    initial_wip: int = 0,
    dispatcher_name: str = "",
) -> Normalizer:
    """Run the simulator under a heuristic and standardize over every feature
    record seen at any decision point; stds are floored to keep the transform
    invertible."""
    collector = FeatureCollector(heuristic)
    sim.run(s, seed, collector, horizon, initial_wip=initial_wip, trace_enabled=False)
    if collector.moments.count == 0:
        raise ValueError("no feature samples collected (no decision points in the run)")
    std = np.maximum(collector.moments.population_std(), STD_FLOOR)
    return Normalizer(
        mean=collector.moments.mean.copy(),
        std=std,
        sample_count=collector.moments.count,
        source_seed=seed,
        dispatcher_name=dispatcher_name,
    )
