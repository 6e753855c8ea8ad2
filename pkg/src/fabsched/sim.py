"""Discrete-event wafer-fab simulator.

Advances an integer-minute clock over a heap of typed events, maintains
machine and lot state (setups, batching with a bounded hold, breakdowns with
preempt-resume, periodic maintenance, transport delays, metrology skips,
queue-time coupling, machine dedication), and exposes dispatch decision
points: whenever the set of startable lots is non-empty the dispatcher is
asked for an order, the hierarchy tiers (queue-time coupling first, then lot
priority) are applied on top, and lots are started greedily in that order
using the three-rule machine allocation (dedicated machine, else longest-idle
machine, else cheapest setup change).

Everything is deterministic for a fixed (scenario, seed, dispatcher): each
stochastic process owns a named RNG stream and event ties are broken by
(kind rank, entity id, insertion order).
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Sequence

from .rng import StreamSet
from .scenario import (
    DEDICATION_BIND,
    DEDICATION_REUSE,
    MINUTES_PER_DAY,
    PriorityClass,
    RouteStep,
    Scenario,
    ToolGroup,
)

# A dispatcher maps (state, legal lot ids) to a permutation of those ids.
Dispatcher = Callable[["FabState", tuple[int, ...]], Sequence[int]]


class MachineStatus(IntEnum):
    IDLE = 0
    BUSY = 1
    IN_SETUP = 2
    DOWN = 3
    MAINTENANCE = 4


class EventKind(IntEnum):
    """Event types; enum order is the deterministic same-timestamp rank."""

    OP_COMPLETE = 0
    TRANSPORT_ARRIVAL = 1
    LOT_RELEASE = 2
    REPAIR = 3
    MAINTENANCE_END = 4
    BREAKDOWN = 5
    MAINTENANCE_START = 6


@dataclass(slots=True)
class Lot:
    lot_id: int
    product_id: int
    priority: PriorityClass
    release_time: int
    due_date: int
    wafer_count: int
    step_index: int = 0
    queue_entry_time: int | None = None
    total_wait: int = 0
    completion_time: int | None = None
    dedications: dict[int, int] = field(default_factory=dict)  # group_id -> machine_id
    cqt_deadline: int | None = None
    in_transit: bool = False


@dataclass(slots=True)
class MachineState:
    machine_id: int
    group_id: int
    status: MachineStatus = MachineStatus.IDLE
    current_setup: str | None = None
    idle_since: int = 0
    busy_until: int | None = None
    current_batch: list[int] = field(default_factory=list)
    # service bookkeeping
    service_start: int | None = None  # planned/actual start of setup+load+proc+unload
    service_setup_minutes: int = 0
    op_generation: int = 0  # invalidates stale op_complete events
    # batch-forming window; while set and in the future, compatible lots may join
    batch_open_until: int | None = None
    batch_context: tuple[int, int, str | None] | None = None  # (product, step, setup)
    # downtime bookkeeping
    resume_remaining: int | None = None
    down_since: int | None = None
    maintenance_pending: bool = False


@dataclass
class FabState:
    scenario: Scenario
    seed: int
    clock: int = 0
    horizon: int | None = None
    events: list = field(default_factory=list)
    machines: list[MachineState] = field(default_factory=list)
    machines_by_group: dict[int, list[MachineState]] = field(default_factory=dict)
    lots: dict[int, Lot] = field(default_factory=dict)  # WIP
    finished: list[Lot] = field(default_factory=list)
    queues: dict[int, list[int]] = field(default_factory=dict)  # group -> queued lots
    streams: StreamSet | None = None
    trace: list[dict] = field(default_factory=list)
    trace_enabled: bool = True
    released_count: int = 0
    cqt_violations: int = 0
    decision_count: int = 0
    next_lot_id: int = 0
    _event_seq: int = 0
    _last_event_time: int = 0

    def machine(self, machine_id: int) -> MachineState:
        return self.machines[machine_id]

    def lot_step(self, lot: Lot) -> RouteStep:
        return self.scenario.product(lot.product_id).route[lot.step_index]

    def record(self, kind: str, **data) -> None:
        if self.trace_enabled:
            self.trace.append({"t": self.clock, "kind": kind, **data})


def lot_weight(st: FabState, lot: Lot) -> float:
    return st.scenario.priority_weights.weight(lot.priority)


def lot_remaining_minutes(st: FabState, lot: Lot) -> int:
    """Sum of mean processing times of the current and all later steps."""
    return st.scenario.remaining_work(lot.product_id, lot.step_index)


def _proc_minutes(step: RouteStep, lot: Lot, nominal_wafers: int) -> int:
    if not step.per_wafer:
        return step.mean_proc_time
    return max(1, round(step.mean_proc_time * lot.wafer_count / nominal_wafers))


def _setup_minutes(group: ToolGroup, machine: MachineState, step: RouteStep) -> int:
    if step.setup_id is None or group.setups is None:
        return 0
    return group.setups.cost(machine.current_setup, step.setup_id, step.force_resetup)


# ---------------------------------------------------------------------------
# Event scheduling
# ---------------------------------------------------------------------------


def _schedule(st: FabState, time: int, kind: EventKind, entity_id: int, payload: int = 0) -> None:
    st._event_seq += 1
    heapq.heappush(st.events, (time, int(kind), entity_id, st._event_seq, payload))


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def init(s: Scenario, seed: int, initial_wip: int = 0, trace_enabled: bool = True) -> FabState:
    """Build the time-zero world: machines, pre-seeded events, initial WIP lots."""
    st = FabState(scenario=s, seed=seed, streams=StreamSet(seed), trace_enabled=trace_enabled)

    machine_id = 0
    for g in s.tool_groups:
        members: list[MachineState] = []
        for i in range(g.machine_count):
            setup = None
            if g.setups is not None:
                setup = g.setups.setup_ids[i % len(g.setups.setup_ids)]
            m = MachineState(machine_id=machine_id, group_id=g.group_id, current_setup=setup)
            st.machines.append(m)
            members.append(m)
            machine_id += 1
        st.machines_by_group[g.group_id] = members
        st.queues[g.group_id] = []

    for p in s.products:
        stream = st.streams.get(f"release:p{p.product_id}")
        first = max(1, round(stream.expovariate(p.release_rate / MINUTES_PER_DAY)))
        _schedule(st, first, EventKind.LOT_RELEASE, p.product_id)

    for g in s.tool_groups:
        members = st.machines_by_group[g.group_id]
        for i, m in enumerate(members):
            if g.mtbf_mean is not None:
                ttf = st.streams.get(f"fail:m{m.machine_id}").expovariate(1.0 / g.mtbf_mean)
                _schedule(st, max(1, round(ttf)), EventKind.BREAKDOWN, m.machine_id)
            if g.maintenance_period is not None:
                offset = (i * g.maintenance_period) // len(members)
                _schedule(
                    st, g.maintenance_period + offset, EventKind.MAINTENANCE_START, m.machine_id
                )

    wip_stream = st.streams.get("init")
    for _ in range(initial_wip):
        product = s.products[wip_stream.randrange(len(s.products))]
        step_index = wip_stream.randrange(len(product.route))
        lot = _new_lot(st, product.product_id, release_time=0, stream=wip_stream)
        lot.step_index = step_index
        # a reuse step may lie ahead of a bind step that never ran; pre-bind it
        for step in product.route[:step_index]:
            if step.dedication == DEDICATION_BIND:
                members = st.machines_by_group[step.group_id]
                lot.dedications[step.group_id] = members[
                    wip_stream.randrange(len(members))
                ].machine_id
        _enter_queue(st, lot, 0)
    return st


def _new_lot(st: FabState, product_id: int, release_time: int, stream) -> Lot:
    product = st.scenario.product(product_id)
    u = stream.random()
    if u < product.priority_mix.super_hot:
        priority = PriorityClass.SUPER_HOT
    elif u < product.priority_mix.super_hot + product.priority_mix.hot:
        priority = PriorityClass.HOT
    else:
        priority = PriorityClass.REGULAR
    lo, hi = product.wafer_count_range
    lot = Lot(
        lot_id=st.next_lot_id,
        product_id=product_id,
        priority=priority,
        release_time=release_time,
        due_date=st.scenario.due_date(product, release_time),
        wafer_count=stream.randint(lo, hi),
    )
    st.next_lot_id += 1
    st.lots[lot.lot_id] = lot
    st.released_count += 1
    return lot


# ---------------------------------------------------------------------------
# Queue entry, metrology skips, lot completion
# ---------------------------------------------------------------------------


def _enter_queue(st: FabState, lot: Lot, t: int) -> None:
    """Place a lot in its current step's queue, resolving skip chains first."""
    s = st.scenario
    skip_stream = st.streams.get("skip")
    while True:
        step = st.lot_step(lot)
        if step.skip_probability > 0 and skip_stream.random() < step.skip_probability:
            st.record("skip", lot=lot.lot_id, step=lot.step_index)
            # a pending queue-time deadline is satisfied vacuously by the skip
            lot.cqt_deadline = None
            if step.cqt_limit_to_next is not None:
                lot.cqt_deadline = t + step.cqt_limit_to_next
            if lot.step_index == len(s.product(lot.product_id).route) - 1:
                _finish_lot(st, lot, t)
                return
            next_step = s.product(lot.product_id).route[lot.step_index + 1]
            delay = s.transport_minutes(
                s.group(step.group_id).family_id, s.group(next_step.group_id).family_id
            )
            lot.step_index += 1
            if delay > 0:
                lot.in_transit = True
                _schedule(st, t + delay, EventKind.TRANSPORT_ARRIVAL, lot.lot_id)
                return
            continue
        break
    lot.in_transit = False
    lot.queue_entry_time = t
    st.queues[step.group_id].append(lot.lot_id)
    _try_join_open_batch(st, lot, t)


def _finish_lot(st: FabState, lot: Lot, t: int) -> None:
    lot.completion_time = t
    lot.queue_entry_time = None
    del st.lots[lot.lot_id]
    st.finished.append(lot)
    st.record(
        "finish",
        lot=lot.lot_id,
        product=lot.product_id,
        priority=int(lot.priority),
        release=lot.release_time,
        due=lot.due_date,
    )


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


def _open_batch_machines(st: FabState, group_id: int, t: int) -> list[MachineState]:
    group = st.scenario.group(group_id)
    out = []
    for m in st.machines_by_group[group_id]:
        if (
            m.batch_open_until is not None
            and t < m.batch_open_until
            and len(m.current_batch) < group.batch_max
            # a machine that broke down mid-hold keeps its forming batch but
            # cannot accept joins until repair shifts its schedule
            and m.status in (MachineStatus.BUSY, MachineStatus.IN_SETUP)
        ):
            out.append(m)
    return out


def _batch_compatible(st: FabState, machine: MachineState, lot: Lot) -> bool:
    step = st.lot_step(lot)
    if machine.batch_context != (lot.product_id, lot.step_index, step.setup_id):
        return False
    if step.dedication == DEDICATION_REUSE:
        return lot.dedications.get(machine.group_id) == machine.machine_id
    return True


def _batch_duration(st: FabState, machine: MachineState) -> int:
    group = st.scenario.group(machine.group_id)
    lots = [st.lots[i] for i in machine.current_batch]
    product = st.scenario.product(lots[0].product_id)
    step = product.route[lots[0].step_index]
    proc = max(_proc_minutes(step, lot, product.nominal_wafers) for lot in lots)
    return machine.service_setup_minutes + group.load_time + proc + group.unload_time


def _reschedule_completion(st: FabState, machine: MachineState) -> None:
    machine.op_generation += 1
    _schedule(
        st, machine.busy_until, EventKind.OP_COMPLETE, machine.machine_id, machine.op_generation
    )


def _try_join_open_batch(st: FabState, lot: Lot, t: int) -> bool:
    """Merge a freshly queued lot into a compatible forming batch, if any."""
    group_id = st.lot_step(lot).group_id
    for m in _open_batch_machines(st, group_id, t):
        if _batch_compatible(st, m, lot):
            st.queues[group_id].remove(lot.lot_id)
            m.current_batch.append(lot.lot_id)
            group = st.scenario.group(group_id)
            if len(m.current_batch) >= group.batch_max:
                m.batch_open_until = None
                m.service_start = t
            m.busy_until = m.service_start + _batch_duration(st, m)
            _reschedule_completion(st, m)
            st.record("batch_join", lot=lot.lot_id, machine=m.machine_id)
            return True
    return False


# ---------------------------------------------------------------------------
# Legality and allocation
# ---------------------------------------------------------------------------


def _idle_machines(st: FabState, group_id: int) -> list[MachineState]:
    return [m for m in st.machines_by_group[group_id] if m.status == MachineStatus.IDLE]


def _lot_is_dispatchable(
    st: FabState, lot: Lot, idle: list[MachineState], open_batches: list[MachineState]
) -> bool:
    step = st.lot_step(lot)
    if step.dedication == DEDICATION_REUSE:
        bound = lot.dedications.get(step.group_id)
        if bound is None:
            return False
        m = st.machine(bound)
        return m.status == MachineStatus.IDLE or (
            any(ob.machine_id == bound for ob in open_batches)
            and _batch_compatible(st, m, lot)
        )
    if idle:
        return True
    return any(_batch_compatible(st, m, lot) for m in open_batches)


def legal_lots(st: FabState) -> tuple[int, ...]:
    """Lots whose current operation can start right now on some machine."""
    out: list[int] = []
    for group_id, queue in st.queues.items():
        if not queue:
            continue
        idle = _idle_machines(st, group_id)
        open_batches = _open_batch_machines(st, group_id, st.clock)
        if not idle and not open_batches:
            continue
        for lot_id in queue:
            lot = st.lots[lot_id]
            if _lot_is_dispatchable(st, lot, idle, open_batches):
                out.append(lot_id)
    out.sort()
    return tuple(out)


def allocate(st: FabState, lot: Lot) -> int:
    """Pick the machine for a startable lot.

    Dedicated lots go to their bound machine; otherwise a compatible forming
    batch is joined (lowest machine id); otherwise, for setup-free operations
    the longest-idle machine wins and for setup operations the one with the
    cheapest effective changeover, ties broken by lowest machine id.
    """
    step = st.lot_step(lot)
    group = st.scenario.group(step.group_id)
    if step.dedication == DEDICATION_REUSE:
        return lot.dedications[step.group_id]
    open_batches = [
        m
        for m in _open_batch_machines(st, step.group_id, st.clock)
        if _batch_compatible(st, m, lot)
    ]
    if open_batches:
        return min(open_batches, key=lambda m: m.machine_id).machine_id
    idle = _idle_machines(st, step.group_id)
    if step.setup_id is None:
        chosen = min(idle, key=lambda m: (m.idle_since, m.machine_id))
    else:
        chosen = min(idle, key=lambda m: (_setup_minutes(group, m, step), m.machine_id))
    return chosen.machine_id


# ---------------------------------------------------------------------------
# Service start
# ---------------------------------------------------------------------------


def _begin_service(st: FabState, machine: MachineState, lot_ids: list[int], start: int, hold_until: int | None) -> None:
    lot = st.lots[lot_ids[0]]
    step = st.lot_step(lot)
    group = st.scenario.group(step.group_id)
    setup_minutes = _setup_minutes(group, machine, step)
    if step.setup_id is not None:
        machine.current_setup = step.setup_id
    machine.current_batch = list(lot_ids)
    machine.service_setup_minutes = setup_minutes
    machine.service_start = start
    machine.batch_open_until = hold_until
    machine.batch_context = (lot.product_id, lot.step_index, step.setup_id)
    machine.status = MachineStatus.IN_SETUP if setup_minutes > 0 else MachineStatus.BUSY
    machine.busy_until = start + _batch_duration(st, machine)
    _reschedule_completion(st, machine)
    st.record(
        "start",
        machine=machine.machine_id,
        lots=list(lot_ids),
        step=lot.step_index,
        start=start,
        setup=setup_minutes,
        held=hold_until is not None,
    )


def _start_on_machine(st: FabState, lot: Lot, machine: MachineState, t: int) -> None:
    step = st.lot_step(lot)
    group = st.scenario.group(step.group_id)
    if machine.batch_open_until is not None and t < machine.batch_open_until:
        _try_join_open_batch(st, lot, t)
        return
    queue = st.queues[step.group_id]
    queue.remove(lot.lot_id)
    batch = [lot.lot_id]
    if group.is_batch:
        # merge queued lots running the same (product, step, setup), oldest first
        extras = [
            st.lots[i]
            for i in queue
            if st.lots[i].product_id == lot.product_id
            and st.lots[i].step_index == lot.step_index
            and (
                st.lot_step(st.lots[i]).dedication != DEDICATION_REUSE
                or st.lots[i].dedications.get(group.group_id) == machine.machine_id
            )
        ]
        extras.sort(key=lambda x: (x.queue_entry_time, x.lot_id))
        for extra in extras[: group.batch_max - 1]:
            queue.remove(extra.lot_id)
            batch.append(extra.lot_id)
        if len(batch) < group.batch_min:
            hold = step.mean_proc_time // 2
            _begin_service(st, machine, batch, start=t + hold, hold_until=t + hold)
            return
    _begin_service(st, machine, batch, start=t, hold_until=None)


# ---------------------------------------------------------------------------
# Hierarchy and dispatching
# ---------------------------------------------------------------------------


def apply_hierarchy(
    st: FabState, agent_order: Sequence[int], legal: tuple[int, ...] | None = None
) -> list[int]:
    """Re-rank an agent's order: queue-time-constrained lots first, then by
    priority class, preserving the agent's relative order inside each tier."""
    if legal is None:
        legal = legal_lots(st)
    if len(agent_order) != len(legal) or set(agent_order) != set(legal):
        raise ValueError("agent order is not a permutation of the legal lot set")

    def tier(lot_id: int) -> tuple[int, int]:
        lot = st.lots[lot_id]
        return (0 if lot.cqt_deadline is not None else 1, -int(lot.priority))

    return sorted(agent_order, key=tier)


def dispatch_step(st: FabState, ordered: Sequence[int]) -> FabState:
    """Start lots in the given order until resources run out, then advance the
    clock to the next decision point (or the horizon)."""
    if st.horizon is None:
        raise ValueError("dispatch_step requires st.horizon to be set")
    for lot_id in ordered:
        lot = st.lots.get(lot_id)
        if lot is None:
            continue
        step = st.lot_step(lot)
        if lot.lot_id not in st.queues[step.group_id]:
            continue  # merged into a batch earlier in this walk
        idle = _idle_machines(st, step.group_id)
        open_batches = _open_batch_machines(st, step.group_id, st.clock)
        if not _lot_is_dispatchable(st, lot, idle, open_batches):
            continue
        machine = st.machine(allocate(st, lot))
        _start_on_machine(st, lot, machine, st.clock)
    _advance_to_next_decision(st)
    return st


def _advance_to_next_decision(st: FabState) -> bool:
    """Pop event batches until some lot is dispatchable or the horizon is hit.

    Returns True when stopping at a decision point, False at the horizon. All
    events sharing a timestamp are processed before the legality check, so one
    timestamp yields at most one decision.
    """
    horizon = st.horizon
    while True:
        if not st.events or st.events[0][0] > horizon:
            st.clock = horizon
            return False
        t = st.events[0][0]
        assert t >= st._last_event_time, "event queue went backwards"
        st.clock = t
        while st.events and st.events[0][0] == t:
            _, kind, entity_id, _, payload = heapq.heappop(st.events)
            st._last_event_time = t
            _handle_event(st, EventKind(kind), entity_id, payload, t)
        if t >= horizon:
            return False
        if legal_lots(st):
            return True


def run(
    s: Scenario,
    seed: int,
    dispatcher: Dispatcher,
    horizon: int,
    initial_wip: int = 0,
    trace_enabled: bool = True,
) -> FabState:
    """Simulate from time zero to the horizon under the given dispatcher."""
    if horizon <= 0:
        st = init(s, seed, initial_wip, trace_enabled)
        st.horizon = horizon
        st.clock = max(0, horizon)
        return st
    st = init(s, seed, initial_wip, trace_enabled)
    st.horizon = horizon
    while st.clock < horizon:
        legal = legal_lots(st)
        if not legal:
            if not _advance_to_next_decision(st):
                break
            continue
        st.decision_count += 1
        ordered = apply_hierarchy(st, dispatcher(st, legal), legal)
        st.record("decision", order=list(ordered))
        dispatch_step(st, ordered)
    return st


# ---------------------------------------------------------------------------
# Event handlers
# ---------------------------------------------------------------------------


def _handle_event(st: FabState, kind: EventKind, entity_id: int, payload: int, t: int) -> None:
    if kind == EventKind.OP_COMPLETE:
        _on_op_complete(st, st.machine(entity_id), payload, t)
    elif kind == EventKind.TRANSPORT_ARRIVAL:
        _enter_queue(st, st.lots[entity_id], t)
    elif kind == EventKind.LOT_RELEASE:
        _on_release(st, entity_id, t)
    elif kind == EventKind.REPAIR:
        _on_repair(st, st.machine(entity_id), t)
    elif kind == EventKind.MAINTENANCE_END:
        _on_maintenance_end(st, st.machine(entity_id), t)
    elif kind == EventKind.BREAKDOWN:
        _on_breakdown(st, st.machine(entity_id), t)
    elif kind == EventKind.MAINTENANCE_START:
        _on_maintenance_start(st, st.machine(entity_id), t)


def _on_release(st: FabState, product_id: int, t: int) -> None:
    product = st.scenario.product(product_id)
    stream = st.streams.get(f"release:p{product_id}")
    lot = _new_lot(st, product_id, release_time=t, stream=stream)
    st.record("release", lot=lot.lot_id, product=product_id, priority=int(lot.priority), due=lot.due_date)
    gap = max(1, round(stream.expovariate(product.release_rate / MINUTES_PER_DAY)))
    _schedule(st, t + gap, EventKind.LOT_RELEASE, product_id)
    _enter_queue(st, lot, t)


def _on_op_complete(st: FabState, machine: MachineState, generation: int, t: int) -> None:
    if generation != machine.op_generation:
        return  # superseded by a batch join, breakdown or repair
    s = st.scenario
    lot_ids = list(machine.current_batch)
    start = machine.service_start
    st.record(
        "complete",
        machine=machine.machine_id,
        lots=lot_ids,
        start=start,
        setup=machine.service_setup_minutes,
    )
    machine.current_batch = []
    machine.busy_until = None
    machine.service_start = None
    machine.service_setup_minutes = 0
    machine.batch_open_until = None
    machine.batch_context = None
    machine.status = MachineStatus.IDLE
    machine.idle_since = t
    if machine.maintenance_pending:
        _enter_maintenance(st, machine, t)

    for lot_id in lot_ids:
        lot = st.lots[lot_id]
        step = st.lot_step(lot)
        lot.total_wait += max(0, start - lot.queue_entry_time)
        lot.queue_entry_time = None
        if lot.cqt_deadline is not None:
            if start > lot.cqt_deadline:
                st.cqt_violations += 1
                st.record("cqt_violation", lot=lot_id, step=lot.step_index, deadline=lot.cqt_deadline, started=start)
            lot.cqt_deadline = None
        if step.dedication == DEDICATION_BIND:
            lot.dedications[step.group_id] = machine.machine_id
        if step.cqt_limit_to_next is not None:
            lot.cqt_deadline = t + step.cqt_limit_to_next
        route = s.product(lot.product_id).route
        if lot.step_index == len(route) - 1:
            _finish_lot(st, lot, t)
            continue
        next_step = route[lot.step_index + 1]
        delay = s.transport_minutes(
            s.group(step.group_id).family_id, s.group(next_step.group_id).family_id
        )
        lot.step_index += 1
        if delay > 0:
            lot.in_transit = True
            _schedule(st, t + delay, EventKind.TRANSPORT_ARRIVAL, lot.lot_id)
        else:
            _enter_queue(st, lot, t)


def _on_breakdown(st: FabState, machine: MachineState, t: int) -> None:
    group = st.scenario.group(machine.group_id)
    stream = st.streams.get(f"fail:m{machine.machine_id}")
    if machine.status in (MachineStatus.DOWN, MachineStatus.MAINTENANCE):
        # not operating; the failure clock restarts
        ttf = stream.expovariate(1.0 / group.mtbf_mean)
        _schedule(st, t + max(1, round(ttf)), EventKind.BREAKDOWN, machine.machine_id)
        return
    if machine.status in (MachineStatus.BUSY, MachineStatus.IN_SETUP):
        machine.resume_remaining = machine.busy_until - t
        machine.op_generation += 1  # invalidate the in-flight completion
    else:
        machine.resume_remaining = None
    machine.status = MachineStatus.DOWN
    machine.down_since = t
    ttr = stream.expovariate(1.0 / group.mttr_mean)
    _schedule(st, t + max(1, round(ttr)), EventKind.REPAIR, machine.machine_id)
    st.record("breakdown", machine=machine.machine_id)


def _on_repair(st: FabState, machine: MachineState, t: int) -> None:
    group = st.scenario.group(machine.group_id)
    down_since = machine.down_since
    delta = t - down_since
    machine.down_since = None
    st.record("repair", machine=machine.machine_id)
    if machine.resume_remaining is not None:
        # preempt-resume: the interrupted service continues where it stopped
        machine.status = MachineStatus.BUSY
        machine.busy_until = t + machine.resume_remaining
        machine.resume_remaining = None
        if machine.batch_open_until is not None:
            machine.batch_open_until += delta
        if machine.service_start > down_since:
            # the hold window was interrupted before service actually began
            machine.service_start += delta
        _reschedule_completion(st, machine)
    else:
        machine.status = MachineStatus.IDLE
        machine.idle_since = t
        if machine.maintenance_pending:
            _enter_maintenance(st, machine, t)
    stream = st.streams.get(f"fail:m{machine.machine_id}")
    ttf = stream.expovariate(1.0 / group.mtbf_mean)
    _schedule(st, t + max(1, round(ttf)), EventKind.BREAKDOWN, machine.machine_id)


def _enter_maintenance(st: FabState, machine: MachineState, t: int) -> None:
    group = st.scenario.group(machine.group_id)
    machine.maintenance_pending = False
    machine.status = MachineStatus.MAINTENANCE
    _schedule(st, t + group.maintenance_duration, EventKind.MAINTENANCE_END, machine.machine_id)
    st.record("maintenance_start", machine=machine.machine_id)


def _on_maintenance_start(st: FabState, machine: MachineState, t: int) -> None:
    if machine.status != MachineStatus.IDLE:
        machine.maintenance_pending = True  # deferred until the machine frees up
        return
    _enter_maintenance(st, machine, t)


def _on_maintenance_end(st: FabState, machine: MachineState, t: int) -> None:
    group = st.scenario.group(machine.group_id)
    machine.status = MachineStatus.IDLE
    machine.idle_since = t
    st.record("maintenance_end", machine=machine.machine_id)
    _schedule(st, t + group.maintenance_period, EventKind.MAINTENANCE_START, machine.machine_id)


# ---------------------------------------------------------------------------
# Trace export
# ---------------------------------------------------------------------------


def write_trace(st: FabState, path) -> int:
    """Write the trace as line-delimited JSON; returns the record count."""
    import json

    with open(path, "w") as fh:
        for rec in st.trace:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return len(st.trace)
