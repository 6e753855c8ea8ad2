"""Dispatchers: the six hierarchical tie-break heuristics and the learned
policy wrapper.

A dispatcher is a callable (state, legal lot ids) -> permutation of those ids
and must not mutate the state. The hierarchical heuristics order by fixed
tiers (queue-time coupling, priority class, setup avoidance) before their
rule-specific key; the policy dispatcher orders purely by descending network
score and relies on the simulator re-applying the first two tiers on top.
"""

from __future__ import annotations

import numpy as np

from . import net, sim
from .features import Normalizer, extract_matrix
from .net import LotBatch, PolicyParams
from .sim import Dispatcher, FabState, MachineStatus

RULE_NAMES = ("fifo", "cr", "spt", "srpt", "edd", "ls")


def _needs_no_setup_change(st: FabState, lot) -> bool:
    """True when the lot's operation can start somewhere without reconfiguring:
    no setup required, some idle machine already holds it, or a compatible
    forming batch can be joined."""
    step = st.lot_step(lot)
    group = st.scenario.group(step.group_id)
    if step.setup_id is None or group.setups is None:
        return True
    for m in st.machines_by_group[group.group_id]:
        if m.status == MachineStatus.IDLE and sim._setup_minutes(group, m, step) == 0:
            return True
    return any(
        sim._batch_compatible(st, m, lot)
        for m in sim._open_batch_machines(st, group.group_id, st.clock)
    )


def rule_key(rule: str, st: FabState, lot) -> float:
    """The ascending rule-specific sort key (smaller dispatches first)."""
    t = st.clock
    if rule == "fifo":
        return lot.queue_entry_time
    if rule == "cr":
        return (lot.due_date - t) / max(sim.lot_remaining_minutes(st, lot), 1)
    if rule == "spt":
        return st.lot_step(lot).mean_proc_time
    if rule == "srpt":
        return sim.lot_remaining_minutes(st, lot)
    if rule == "edd":
        return lot.due_date
    if rule == "ls":
        return lot.due_date - t - sim.lot_remaining_minutes(st, lot)
    raise ValueError(f"unknown dispatching rule {rule!r}")


def hierarchical_order(rule: str, st: FabState, legal) -> list[int]:
    """Sort by (active queue-time constraint, priority class, setup avoidance,
    rule key, lot id) — the static heuristic stack with `rule` breaking ties."""
    if not legal:
        raise ValueError("legal lot set must be non-empty")

    def key(lot_id: int):
        lot = st.lots[lot_id]
        return (
            0 if lot.cqt_deadline is not None else 1,
            -int(lot.priority),
            0 if _needs_no_setup_change(st, lot) else 1,
            rule_key(rule, st, lot),
            lot_id,
        )

    return sorted(legal, key=key)


class HierarchicalDispatcher:
    """Stateless heuristic dispatcher; safe to share across rollouts."""

    def __init__(self, rule: str):
        if rule not in RULE_NAMES:
            raise ValueError(f"unknown dispatching rule {rule!r}; valid: {RULE_NAMES}")
        self.rule = rule
        self.name = rule

    def __call__(self, st: FabState, legal):
        return hierarchical_order(self.rule, st, legal)


class PolicyDispatcher:
    """Orders lots by descending network score (ties by lot id); the simulator
    applies the queue-time and priority tiers on top of this order."""

    def __init__(self, params: PolicyParams, normalizer: Normalizer, name: str = "agent"):
        self.params = params
        self.normalizer = normalizer
        self.name = name

    def __call__(self, st: FabState, legal):
        if len(legal) == 1:
            return list(legal)
        x, fam = extract_matrix(st, legal)
        batch = LotBatch(x=self.normalizer.normalize_matrix(x), fam=fam)
        scores = net.forward_policy(self.params, batch)
        order = sorted(range(len(legal)), key=lambda i: (-scores[i], legal[i]))
        return [legal[i] for i in order]


def policy_dispatcher(params: PolicyParams, normalizer: Normalizer) -> PolicyDispatcher:
    return PolicyDispatcher(params, normalizer)


def make_dispatcher(name: str) -> Dispatcher:
    """Resolve a CLI dispatcher name: one of the rule names or `agent:<path>`
    pointing at a trained params file with an embedded normalizer."""
    if name in RULE_NAMES:
        return HierarchicalDispatcher(name)
    if name.startswith("agent:"):
        path = name.split(":", 1)[1]
        params, meta = net.load_params(path)
        norm_doc = meta.get("normalizer")
        if norm_doc is None:
            raise ValueError(f"params file {path} has no embedded normalizer")
        normalizer = Normalizer(
            mean=np.array(norm_doc["mean"], dtype=np.float64),
            std=np.array(norm_doc["std"], dtype=np.float64),
            sample_count=norm_doc["sample_count"],
            source_seed=norm_doc["source_seed"],
            dispatcher_name=norm_doc.get("dispatcher_name", ""),
        )
        return PolicyDispatcher(params, normalizer, name=name)
    raise ValueError(
        f"unknown dispatcher {name!r}; valid: {', '.join(RULE_NAMES)}, agent:<params-path>"
    )
