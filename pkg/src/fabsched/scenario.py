"""Fab scenario descriptions: types, validation, JSON persistence, generator.

A scenario is the immutable static world the simulator runs: tool families,
tool groups (machines, setup tables, batching, downtime parameters), products
with their routes, a family-to-family transport delay matrix, and the
scoring constants. Scenarios are stored as a single versioned JSON document
(``schema_version: 1``, see docs/scenario.md).

All times are integer minutes.
"""

from __future__ import annotations

import importlib.resources
import json
import random
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path

MINUTES_PER_DAY = 1440
SCHEMA_VERSION = 1

DEDICATION_NONE = "none"
DEDICATION_BIND = "bind"
DEDICATION_REUSE = "reuse"
_DEDICATIONS = (DEDICATION_NONE, DEDICATION_BIND, DEDICATION_REUSE)

# A generated route must fit a CQT pair, a batch step, a metrology skip and a
# bind/reuse pair plus ordinary steps around them.
MIN_GENERATED_ROUTE_LENGTH = 10


class ScenarioError(Exception):
    """Malformed scenario document (cannot even be parsed into types)."""


class ScenarioValidationError(ScenarioError):
    """Structurally parseable scenario that violates invariants."""

    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("scenario validation failed:\n" + "\n".join(violations))


class PriorityClass(IntEnum):
    """Lot priority tiers; higher value dispatches earlier."""

    REGULAR = 0
    HOT = 1
    SUPER_HOT = 2

    @property
    def key(self) -> str:
        return _PRIORITY_KEYS[self]


_PRIORITY_KEYS = {
    PriorityClass.REGULAR: "regular",
    PriorityClass.HOT: "hot",
    PriorityClass.SUPER_HOT: "super_hot",
}
_PRIORITY_BY_KEY = {v: k for k, v in _PRIORITY_KEYS.items()}


@dataclass(frozen=True)
class ToolFamily:
    family_id: int
    name: str


@dataclass(frozen=True)
class SetupTable:
    """Setup identifiers and the from->to changeover matrix of a tool group.

    The diagonal holds the forced re-setup cost; switching a machine to the
    setup it already holds costs 0 unless the route step forces a re-setup.
    """

    setup_ids: tuple[str, ...]
    changeover_minutes: tuple[tuple[int, ...], ...]

    def index(self, setup_id: str) -> int:
        return self.setup_ids.index(setup_id)

    def cost(self, from_setup: str | None, to_setup: str, force_resetup: bool) -> int:
        j = self.index(to_setup)
        if from_setup == to_setup and not force_resetup:
            return 0
        i = j if from_setup is None else self.index(from_setup)
        return self.changeover_minutes[i][j]


@dataclass(frozen=True)
class ToolGroup:
    group_id: int
    family_id: int
    machine_count: int
    batch_min: int = 1
    batch_max: int = 1
    load_time: int = 0
    unload_time: int = 0
    setups: SetupTable | None = None
    mtbf_mean: int | None = None
    mttr_mean: int | None = None
    maintenance_period: int | None = None
    maintenance_duration: int | None = None

    @property
    def is_batch(self) -> bool:
        return self.batch_max > 1


@dataclass(frozen=True)
class RouteStep:
    step_index: int
    group_id: int
    mean_proc_time: int
    per_wafer: bool = False
    setup_id: str | None = None
    force_resetup: bool = False
    cqt_limit_to_next: int | None = None
    skip_probability: float = 0.0
    metrology: bool = False
    dedication: str = DEDICATION_NONE


@dataclass(frozen=True)
class PriorityMix:
    regular: float
    hot: float
    super_hot: float

    def probability(self, cls: PriorityClass) -> float:
        return (self.regular, self.hot, self.super_hot)[int(cls)]


@dataclass(frozen=True)
class PriorityWeights:
    regular: float = 1.0
    hot: float = 2.0
    super_hot: float = 4.0

    def weight(self, cls: PriorityClass) -> float:
        return (self.regular, self.hot, self.super_hot)[int(cls)]


@dataclass(frozen=True)
class Product:
    product_id: int
    route: tuple[RouteStep, ...]
    release_rate: float  # mean lots per day
    priority_mix: PriorityMix
    flow_factor: float
    wafer_count_range: tuple[int, int]

    @property
    def raw_process_minutes(self) -> int:
        return sum(s.mean_proc_time for s in self.route)

    @property
    def nominal_wafers(self) -> int:
        lo, hi = self.wafer_count_range
        return max(1, (lo + hi) // 2)


@dataclass(frozen=True)
class Scenario:
    families: tuple[ToolFamily, ...]
    tool_groups: tuple[ToolGroup, ...]
    products: tuple[Product, ...]
    transport_delay_matrix: tuple[tuple[int, ...], ...]
    priority_weights: PriorityWeights = PriorityWeights()
    penalty: float = 10.0
    name: str = ""

    _group_index: dict[int, ToolGroup] = field(
        default_factory=dict, repr=False, compare=False
    )
    _product_index: dict[int, Product] = field(
        default_factory=dict, repr=False, compare=False
    )
    _work_suffix: dict[int, tuple[int, ...]] = field(
        default_factory=dict, repr=False, compare=False
    )

    def __post_init__(self):
        object.__setattr__(
            self, "_group_index", {g.group_id: g for g in self.tool_groups}
        )
        object.__setattr__(
            self, "_product_index", {p.product_id: p for p in self.products}
        )
        suffix: dict[int, tuple[int, ...]] = {}
        for p in self.products:
            acc = [0] * (len(p.route) + 1)
            for i in range(len(p.route) - 1, -1, -1):
                acc[i] = acc[i + 1] + p.route[i].mean_proc_time
            suffix[p.product_id] = tuple(acc)
        object.__setattr__(self, "_work_suffix", suffix)

    @property
    def family_count(self) -> int:
        return len(self.families)

    def group(self, group_id: int) -> ToolGroup:
        return self._group_index[group_id]

    def product(self, product_id: int) -> Product:
        return self._product_index[product_id]

    def remaining_work(self, product_id: int, step_index: int) -> int:
        """Mean processing minutes of the step at step_index and all later ones."""
        return self._work_suffix[product_id][step_index]

    def transport_minutes(self, from_family: int, to_family: int) -> int:
        return self.transport_delay_matrix[from_family][to_family]

    def due_date(self, product: Product, release_time: int) -> int:
        return release_time + round(product.flow_factor * product.raw_process_minutes)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def validate(s: Scenario) -> list[str]:
    """Return all invariant violations; an empty list means the scenario is valid."""
    v: list[str] = []
    fam_ids = [f.family_id for f in s.families]
    if sorted(fam_ids) != list(range(len(fam_ids))):
        v.append(f"families: ids must be dense and unique 0..{len(fam_ids) - 1}, got {fam_ids}")
    fam_set = set(fam_ids)

    group_ids = [g.group_id for g in s.tool_groups]
    if len(set(group_ids)) != len(group_ids):
        v.append(f"tool_groups: duplicate group ids in {group_ids}")
    for g in s.tool_groups:
        where = f"tool_group {g.group_id}"
        if g.family_id not in fam_set:
            v.append(f"{where}: unknown family {g.family_id}")
        if g.machine_count < 1:
            v.append(f"{where}: machine_count must be >= 1, got {g.machine_count}")
        if not (1 <= g.batch_min <= g.batch_max):
            v.append(f"{where}: requires 1 <= batch_min <= batch_max, got min={g.batch_min} max={g.batch_max}")
        if g.load_time < 0 or g.unload_time < 0:
            v.append(f"{where}: load/unload times must be >= 0")
        if (g.mtbf_mean is None) != (g.mttr_mean is None):
            v.append(f"{where}: mtbf_mean and mttr_mean must be given together")
        if g.mtbf_mean is not None and (g.mtbf_mean <= 0 or g.mttr_mean <= 0):
            v.append(f"{where}: mtbf_mean and mttr_mean must be > 0")
        if (g.maintenance_period is None) != (g.maintenance_duration is None):
            v.append(f"{where}: maintenance period and duration must be given together")
        if g.maintenance_period is not None and (g.maintenance_period <= 0 or g.maintenance_duration <= 0):
            v.append(f"{where}: maintenance period and duration must be > 0")
        if g.setups is not None:
            n = len(g.setups.setup_ids)
            if len(set(g.setups.setup_ids)) != n:
                v.append(f"{where}: duplicate setup ids")
            if len(g.setups.changeover_minutes) != n or any(
                len(row) != n for row in g.setups.changeover_minutes
            ):
                v.append(f"{where}: changeover matrix must be {n}x{n}")
            elif any(c < 0 for row in g.setups.changeover_minutes for c in row):
                v.append(f"{where}: changeover minutes must be >= 0")

    group_set = set(group_ids)
    product_ids = [p.product_id for p in s.products]
    if len(set(product_ids)) != len(product_ids):
        v.append(f"products: duplicate product ids in {product_ids}")
    for p in s.products:
        where = f"product {p.product_id}"
        if len(p.route) < 1:
            v.append(f"{where}: route must have at least one step")
        mix_sum = p.priority_mix.regular + p.priority_mix.hot + p.priority_mix.super_hot
        if abs(mix_sum - 1.0) > 1e-9:
            v.append(f"{where}: priority_mix must sum to 1, got {mix_sum}")
        if min(p.priority_mix.regular, p.priority_mix.hot, p.priority_mix.super_hot) < 0:
            v.append(f"{where}: priority_mix probabilities must be >= 0")
        if p.flow_factor <= 1:
            v.append(f"{where}: flow_factor must be > 1, got {p.flow_factor}")
        if p.release_rate <= 0:
            v.append(f"{where}: release_rate must be > 0")
        lo, hi = p.wafer_count_range
        if not (1 <= lo <= hi):
            v.append(f"{where}: wafer_count_range must satisfy 1 <= lo <= hi")
        bound_groups: set[int] = set()
        for k, step in enumerate(p.route):
            sw = f"{where} step {k}"
            if step.step_index != k:
                v.append(f"{sw}: step_index must be {k}, got {step.step_index}")
            if step.group_id not in group_set:
                v.append(f"{sw}: unknown tool group {step.group_id}")
                continue
            g = s.group(step.group_id)
            if step.mean_proc_time <= 0:
                v.append(f"{sw}: mean_proc_time must be > 0")
            if step.setup_id is not None:
                if g.setups is None or step.setup_id not in g.setups.setup_ids:
                    v.append(f"{sw}: setup '{step.setup_id}' not defined on group {g.group_id}")
            if not (0.0 <= step.skip_probability <= 1.0):
                v.append(f"{sw}: skip_probability must be in [0, 1]")
            if step.skip_probability > 0 and not step.metrology:
                v.append(f"{sw}: skip_probability > 0 requires a metrology step")
            if step.cqt_limit_to_next is not None:
                if step.cqt_limit_to_next <= 0:
                    v.append(f"{sw}: cqt_limit_to_next must be > 0")
                if k == len(p.route) - 1:
                    v.append(f"{sw}: cqt_limit_to_next on the last step has no successor")
            if step.dedication not in _DEDICATIONS:
                v.append(f"{sw}: dedication must be one of {_DEDICATIONS}")
            elif step.dedication == DEDICATION_BIND:
                bound_groups.add(step.group_id)
            elif step.dedication == DEDICATION_REUSE and step.group_id not in bound_groups:
                v.append(f"{sw}: reuse step has no earlier bind step on group {step.group_id}")

    n_fam = len(s.families)
    if len(s.transport_delay_matrix) != n_fam or any(
        len(row) != n_fam for row in s.transport_delay_matrix
    ):
        v.append(f"transport_delay_matrix: must be {n_fam}x{n_fam}")
    else:
        for i, row in enumerate(s.transport_delay_matrix):
            for j, d in enumerate(row):
                if d < 0:
                    v.append(f"transport_delay_matrix[{i}][{j}]: negative delay {d}")

    if min(s.priority_weights.regular, s.priority_weights.hot, s.priority_weights.super_hot) <= 0:
        v.append("priority_weights: all weights must be > 0")
    if s.penalty <= 0:
        v.append(f"penalty: must be > 0, got {s.penalty}")
    return v


# ---------------------------------------------------------------------------
# JSON (de)serialization
# ---------------------------------------------------------------------------


def to_dict(s: Scenario) -> dict:
    def step_dict(st: RouteStep) -> dict:
        return {
            "step_index": st.step_index,
            "group_id": st.group_id,
            "mean_proc_time": st.mean_proc_time,
            "per_wafer": st.per_wafer,
            "setup_id": st.setup_id,
            "force_resetup": st.force_resetup,
            "cqt_limit_to_next": st.cqt_limit_to_next,
            "skip_probability": st.skip_probability,
            "metrology": st.metrology,
            "dedication": st.dedication,
        }

    return {
        "schema_version": SCHEMA_VERSION,
        "name": s.name,
        "families": [{"family_id": f.family_id, "name": f.name} for f in s.families],
        "tool_groups": [
            {
                "group_id": g.group_id,
                "family_id": g.family_id,
                "machine_count": g.machine_count,
                "batch_min": g.batch_min,
                "batch_max": g.batch_max,
                "load_time": g.load_time,
                "unload_time": g.unload_time,
                "setups": None
                if g.setups is None
                else {
                    "setup_ids": list(g.setups.setup_ids),
                    "changeover_minutes": [list(r) for r in g.setups.changeover_minutes],
                },
                "mtbf_mean": g.mtbf_mean,
                "mttr_mean": g.mttr_mean,
                "maintenance_period": g.maintenance_period,
                "maintenance_duration": g.maintenance_duration,
            }
            for g in s.tool_groups
        ],
        "products": [
            {
                "product_id": p.product_id,
                "route": [step_dict(st) for st in p.route],
                "release_rate": p.release_rate,
                "priority_mix": {
                    "regular": p.priority_mix.regular,
                    "hot": p.priority_mix.hot,
                    "super_hot": p.priority_mix.super_hot,
                },
                "flow_factor": p.flow_factor,
                "wafer_count_range": list(p.wafer_count_range),
            }
            for p in s.products
        ],
        "transport_delay_matrix": [list(r) for r in s.transport_delay_matrix],
        "priority_weights": {
            "regular": s.priority_weights.regular,
            "hot": s.priority_weights.hot,
            "super_hot": s.priority_weights.super_hot,
        },
        "penalty": s.penalty,
    }


def from_dict(doc: dict) -> Scenario:
    try:
        version = doc["schema_version"]
        if version != SCHEMA_VERSION:
            raise ScenarioError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
        families = tuple(
            ToolFamily(family_id=f["family_id"], name=f["name"]) for f in doc["families"]
        )
        groups = []
        for g in doc["tool_groups"]:
            setups = None
            if g.get("setups") is not None:
                setups = SetupTable(
                    setup_ids=tuple(g["setups"]["setup_ids"]),
                    changeover_minutes=tuple(
                        tuple(row) for row in g["setups"]["changeover_minutes"]
                    ),
                )
            groups.append(
                ToolGroup(
                    group_id=g["group_id"],
                    family_id=g["family_id"],
                    machine_count=g["machine_count"],
                    batch_min=g.get("batch_min", 1),
                    batch_max=g.get("batch_max", 1),
                    load_time=g.get("load_time", 0),
                    unload_time=g.get("unload_time", 0),
                    setups=setups,
                    mtbf_mean=g.get("mtbf_mean"),
                    mttr_mean=g.get("mttr_mean"),
                    maintenance_period=g.get("maintenance_period"),
                    maintenance_duration=g.get("maintenance_duration"),
                )
            )
        products = []
        for p in doc["products"]:
            route = tuple(
                RouteStep(
                    step_index=st["step_index"],
                    group_id=st["group_id"],
                    mean_proc_time=st["mean_proc_time"],
                    per_wafer=st.get("per_wafer", False),
                    setup_id=st.get("setup_id"),
                    force_resetup=st.get("force_resetup", False),
                    cqt_limit_to_next=st.get("cqt_limit_to_next"),
                    skip_probability=st.get("skip_probability", 0.0),
                    metrology=st.get("metrology", False),
                    dedication=st.get("dedication", DEDICATION_NONE),
                )
                for st in p["route"]
            )
            mix = p["priority_mix"]
            products.append(
                Product(
                    product_id=p["product_id"],
                    route=route,
                    release_rate=p["release_rate"],
                    priority_mix=PriorityMix(
                        regular=mix["regular"], hot=mix["hot"], super_hot=mix["super_hot"]
                    ),
                    flow_factor=p["flow_factor"],
                    wafer_count_range=tuple(p["wafer_count_range"]),
                )
            )
        weights = doc.get("priority_weights", {})
        return Scenario(
            families=families,
            tool_groups=tuple(groups),
            products=tuple(products),
            transport_delay_matrix=tuple(tuple(r) for r in doc["transport_delay_matrix"]),
            priority_weights=PriorityWeights(
                regular=weights.get("regular", 1.0),
                hot=weights.get("hot", 2.0),
                super_hot=weights.get("super_hot", 4.0),
            ),
            penalty=doc.get("penalty", 10.0),
            name=doc.get("name", ""),
        )
    except (KeyError, TypeError, IndexError) as exc:
        raise ScenarioError(f"malformed scenario document: {exc!r}") from exc


def load_scenario(path: str | Path) -> Scenario:
    """Load, parse and validate a scenario document; raises on any failure."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ScenarioError(f"{path}: top level must be an object")
    s = from_dict(doc)
    violations = validate(s)
    if violations:
        raise ScenarioValidationError(violations)
    return s


def save_scenario(s: Scenario, path: str | Path) -> None:
    Path(path).write_text(json.dumps(to_dict(s), indent=2) + "\n")


def bundled_minifab_path() -> Path:
    """Path of the minifab scenario shipped with the package."""
    return Path(importlib.resources.files("fabsched").joinpath("data/minifab.json"))


def load_minifab() -> Scenario:
    return load_scenario(bundled_minifab_path())


# ---------------------------------------------------------------------------
# Generator
# ---------------------------------------------------------------------------

_FAMILY_NAMES = (
    "diffusion", "litho", "etch", "implant", "cmp", "metrology", "deposition", "wet",
)


@dataclass(frozen=True)
class GeneratorConfig:
    families: int = 4
    groups_per_family: int = 2
    products: int = 3
    route_length: int = 50
    seed: int = 0
    target_utilization: float = 0.75


def generate_minifab(cfg: GeneratorConfig) -> Scenario:
    """Generate a small synthetic scenario exercising every constraint kind.

    Deterministic for a fixed config: repeated calls produce equal scenarios
    (and byte-identical documents via save_scenario). Routes are reentrant and
    always contain a CQT pair, a batch step, a metrology skip step and a
    bind/reuse dedication pair.
    """
    if min(cfg.families, cfg.groups_per_family, cfg.products, cfg.route_length) < 1:
        raise ValueError("all generator counts must be >= 1")
    if cfg.route_length < MIN_GENERATED_ROUTE_LENGTH:
        raise ValueError(
            f"route_length {cfg.route_length} too small to place all mandated step "
            f"kinds (need >= {MIN_GENERATED_ROUTE_LENGTH})"
        )
    rng = random.Random(cfg.seed)

    families = tuple(
        ToolFamily(family_id=i, name=f"{_FAMILY_NAMES[i % len(_FAMILY_NAMES)]}_{i}")
        for i in range(cfg.families)
    )

    n_groups = cfg.families * cfg.groups_per_family
    groups: list[ToolGroup] = []
    batch_gid = rng.randrange(n_groups)
    metrology_gid = rng.randrange(n_groups)
    dedication_gid = rng.randrange(n_groups)
    for gid in range(n_groups):
        setups = None
        if rng.random() < 0.5 and gid != batch_gid:
            n_setups = rng.randint(2, 3)
            ids = tuple(f"s{gid}_{i}" for i in range(n_setups))
            matrix = tuple(
                tuple(
                    rng.randint(5, 15) if i == j else rng.randint(10, 40)
                    for j in range(n_setups)
                )
                for i in range(n_setups)
            )
            setups = SetupTable(setup_ids=ids, changeover_minutes=matrix)
        is_batch = gid == batch_gid
        has_downtime = rng.random() < 0.3
        has_maintenance = rng.random() < 0.25
        groups.append(
            ToolGroup(
                group_id=gid,
                family_id=gid % cfg.families,
                machine_count=rng.randint(2, 3),
                batch_min=rng.randint(2, 3) if is_batch else 1,
                batch_max=rng.randint(4, 6) if is_batch else 1,
                load_time=rng.randint(1, 3),
                unload_time=rng.randint(1, 3),
                setups=setups,
                mtbf_mean=rng.randint(3000, 9000) if has_downtime else None,
                mttr_mean=rng.randint(60, 240) if has_downtime else None,
                maintenance_period=rng.randint(7, 14) * MINUTES_PER_DAY if has_maintenance else None,
                maintenance_duration=rng.randint(120, 360) if has_maintenance else None,
            )
        )

    products: list[Product] = []
    for pid in range(cfg.products):
        length = cfg.route_length
        # reserve slots for the mandated step kinds
        special = rng.sample(range(1, length - 1), 4)
        cqt_pos, batch_pos, metrology_pos, bind_pos = sorted(special)
        reuse_pos = rng.randint(bind_pos + 1, length - 1)
        group_seq = [rng.randrange(n_groups) for _ in range(length)]
        group_seq[batch_pos] = batch_gid
        group_seq[metrology_pos] = metrology_gid
        # the bind/reuse pair visits the same group twice, making every route reentrant
        group_seq[bind_pos] = dedication_gid
        group_seq[reuse_pos] = dedication_gid

        route = []
        for k, gid in enumerate(group_seq):
            g = groups[gid]
            setup_id = None
            if g.setups is not None and rng.random() < 0.7:
                setup_id = rng.choice(g.setups.setup_ids)
            route.append(
                RouteStep(
                    step_index=k,
                    group_id=gid,
                    mean_proc_time=rng.randint(15, 75),
                    per_wafer=rng.random() < 0.15,
                    setup_id=setup_id,
                    force_resetup=setup_id is not None and rng.random() < 0.1,
                    cqt_limit_to_next=rng.randint(90, 300) if k == cqt_pos else None,
                    skip_probability=round(rng.uniform(0.2, 0.5), 3) if k == metrology_pos else 0.0,
                    metrology=k == metrology_pos,
                    dedication=DEDICATION_BIND
                    if k == bind_pos
                    else (DEDICATION_REUSE if k == reuse_pos else DEDICATION_NONE),
                )
            )
        mix_hot = round(rng.uniform(0.10, 0.18), 3)
        mix_super = round(rng.uniform(0.02, 0.06), 3)
        products.append(
            Product(
                product_id=pid,
                route=tuple(route),
                release_rate=1.0,  # rescaled below to hit the target utilization
                priority_mix=PriorityMix(
                    regular=round(1.0 - mix_hot - mix_super, 3),
                    hot=mix_hot,
                    super_hot=mix_super,
                ),
                flow_factor=round(rng.uniform(1.8, 2.8), 2),
                wafer_count_range=(20, 25),
            )
        )

    # Scale the (uniform) release rates so the bottleneck group sits at the
    # target utilization: load_g = sum_p rate_p * work_pg <= u * capacity_g.
    work_per_group = [0.0] * n_groups
    for p in products:
        for st in p.route:
            g = groups[st.group_id]
            eff = st.mean_proc_time / (g.batch_max if g.is_batch else 1)
            work_per_group[st.group_id] += eff + g.load_time + g.unload_time
    bottleneck = max(
        work_per_group[g.group_id] / (g.machine_count * MINUTES_PER_DAY) for g in groups
    )
    rate = cfg.target_utilization / bottleneck if bottleneck > 0 else 1.0
    products = [replace(p, release_rate=round(rate, 4)) for p in products]

    matrix = tuple(
        tuple(
            rng.randint(2, 5) if i == j else rng.randint(5, 20)
            for j in range(cfg.families)
        )
        for i in range(cfg.families)
    )
    scenario = Scenario(
        families=families,
        tool_groups=tuple(groups),
        products=tuple(products),
        transport_delay_matrix=matrix,
        priority_weights=PriorityWeights(),
        penalty=10.0,
        name=f"generated_f{cfg.families}_g{cfg.groups_per_family}_p{cfg.products}"
        f"_l{cfg.route_length}_s{cfg.seed}",
    )
    violations = validate(scenario)
    if violations:  # a generator bug, not a user error
        raise AssertionError(f"generated scenario is invalid: {violations}")
    return scenario
