"""Dispatcher tests: rule-key semantics, oracle equivalence against an
independent comparison sort, and the policy wrapper's ordering contract."""

import random

import numpy as np
import pytest

from conftest import make_single_group_scenario, place_lot, random_setup_table
from fabsched import net, sim
from fabsched.dispatch import (
    RULE_NAMES,
    HierarchicalDispatcher,
    PolicyDispatcher,
    hierarchical_order,
    make_dispatcher,
    policy_dispatcher,
    rule_key,
)
from fabsched.features import NUMERIC_FEATURES, Normalizer, extract_matrix
from fabsched.scenario import (
    PriorityClass,
    PriorityMix,
    PriorityWeights,
    Product,
    RouteStep,
    Scenario,
    ToolFamily,
    ToolGroup,
)


# --- independent oracle: insertion sort with a pairwise comparator -------------


def _lot_sort_fields(rule, st, lot):
    step = st.lot_step(lot)
    remaining = sum(
        s.mean_proc_time
        for s in st.scenario.product(lot.product_id).route[lot.step_index:]
    )
    if rule == "fifo":
        key = lot.queue_entry_time
    elif rule == "cr":
        key = (lot.due_date - st.clock) / max(remaining, 1)
    elif rule == "spt":
        key = step.mean_proc_time
    elif rule == "srpt":
        key = remaining
    elif rule == "edd":
        key = lot.due_date
    else:  # ls
        key = lot.due_date - st.clock - remaining
    return key


def _no_setup_change(st, lot):
    step = st.lot_step(lot)
    group = st.scenario.group(step.group_id)
    if step.setup_id is None or group.setups is None:
        return True
    for m in st.machines_by_group[group.group_id]:
        if m.status is sim.MachineStatus.IDLE:
            if group.setups.cost(m.current_setup, step.setup_id, step.force_resetup) == 0:
                return True
    return False


def _comes_before(rule, st, a, b):
    la, lb = st.lots[a], st.lots[b]
    ca = (la.cqt_deadline is not None, lb.cqt_deadline is not None)
    if ca[0] != ca[1]:
        return ca[0]
    if la.priority != lb.priority:
        return la.priority > lb.priority
    sa, sb = _no_setup_change(st, la), _no_setup_change(st, lb)
    if sa != sb:
        return sa
    ka, kb = _lot_sort_fields(rule, st, la), _lot_sort_fields(rule, st, lb)
    if ka != kb:
        return ka < kb
    return a < b


def oracle_order(rule, st, legal):
    out = []
    for lot_id in legal:
        pos = 0
        while pos < len(out) and _comes_before(rule, st, out[pos], lot_id):
            pos += 1
        out.insert(pos, lot_id)
    return out


# --- randomized state construction ----------------------------------------------


def build_random_state(rng: random.Random):
    n_groups = rng.randint(1, 3)
    families = (ToolFamily(0, "f0"),)
    groups = []
    for gid in range(n_groups):
        setups = random_setup_table(rng, rng.randint(2, 3), f"g{gid}_") if rng.random() < 0.6 else None
        groups.append(
            ToolGroup(group_id=gid, family_id=0, machine_count=rng.randint(1, 3), setups=setups)
        )
    products = []
    for pid in range(rng.randint(1, 3)):
        route = []
        for k in range(rng.randint(2, 5)):
            gid = rng.randrange(n_groups)
            setup_id = None
            if groups[gid].setups is not None and rng.random() < 0.7:
                setup_id = rng.choice(groups[gid].setups.setup_ids)
            route.append(
                RouteStep(step_index=k, group_id=gid, mean_proc_time=rng.randint(5, 90),
                          setup_id=setup_id)
            )
        products.append(
            Product(pid, tuple(route), 1e-3, PriorityMix(1.0, 0.0, 0.0), 2.0, (20, 25))
        )
    scenario = Scenario(
        families=families, tool_groups=tuple(groups), products=tuple(products),
        transport_delay_matrix=((0,),), priority_weights=PriorityWeights(), penalty=10.0,
    )
    st = sim.init(scenario, seed=rng.randrange(10_000))
    st.clock = rng.randint(100, 2_000)
    st.horizon = 10**7
    for m in st.machines:
        if rng.random() < 0.3:
            m.status = sim.MachineStatus.BUSY
        m.idle_since = rng.randint(0, st.clock)
        if m.current_setup is not None and rng.random() < 0.5:
            group = scenario.group(m.group_id)
            m.current_setup = rng.choice(group.setups.setup_ids)
    n_lots = rng.randint(1, 64)
    for _ in range(n_lots):
        pid = rng.randrange(len(products))
        step_index = rng.randrange(len(products[pid].route))
        place_lot(
            st,
            product_id=pid,
            step_index=step_index,
            priority=PriorityClass(rng.choice([0, 0, 0, 1, 2])),
            queue_entry_time=rng.randint(0, st.clock),
            due_date=rng.randint(0, 6_000),
            cqt_deadline=rng.randint(st.clock, st.clock + 500) if rng.random() < 0.25 else None,
        )
    legal = [lot_id for lot_id in st.lots]
    rng.shuffle(legal)
    return st, tuple(legal)


@pytest.mark.parametrize("rule", RULE_NAMES)
def test_rule_matches_comparison_sort_oracle(rule):
    rng = random.Random(1000 + RULE_NAMES.index(rule))
    for _ in range(150):
        st, legal = build_random_state(rng)
        got = hierarchical_order(rule, st, legal)
        want = oracle_order(rule, st, list(legal))
        assert got == want
        assert sorted(got) == sorted(legal)  # permutation


@pytest.mark.parametrize("rule", RULE_NAMES)
def test_rule_deterministic_under_input_permutation(rule):
    rng = random.Random(99)
    st, legal = build_random_state(rng)
    order1 = hierarchical_order(rule, st, legal)
    shuffled = list(legal)
    rng.shuffle(shuffled)
    order2 = hierarchical_order(rule, st, tuple(shuffled))
    assert order1 == order2


# --- hand examples ---------------------------------------------------------------


def test_fifo_earliest_entry_first():
    s = make_single_group_scenario(machine_count=4, release_rate=1e-3)
    st = sim.init(s, seed=0)
    st.clock = 50
    st.horizon = 10_000
    a = place_lot(st, queue_entry_time=5)
    b = place_lot(st, queue_entry_time=3)
    assert hierarchical_order("fifo", st, (a.lot_id, b.lot_id)) == [b.lot_id, a.lot_id]


def test_cr_smallest_ratio_first():
    s = make_single_group_scenario(machine_count=4, mean_proc=100, release_rate=1e-3)
    st = sim.init(s, seed=0)
    st.clock = 0
    st.horizon = 10_000
    urgent = place_lot(st, due_date=50)    # ratio 0.5
    relaxed = place_lot(st, due_date=200)  # ratio 2.0
    assert rule_key("cr", st, urgent) == pytest.approx(0.5)
    assert rule_key("cr", st, relaxed) == pytest.approx(2.0)
    assert hierarchical_order("cr", st, (relaxed.lot_id, urgent.lot_id)) == [
        urgent.lot_id, relaxed.lot_id,
    ]


def test_priority_tier_dominates_rule_key():
    s = make_single_group_scenario(machine_count=4, mean_proc=100, release_rate=1e-3)
    st = sim.init(s, seed=0)
    st.horizon = 10_000
    hot_relaxed = place_lot(st, priority=PriorityClass.HOT, due_date=500)     # CR 5.0
    regular_urgent = place_lot(st, due_date=10)                               # CR 0.1
    assert hierarchical_order("cr", st, (regular_urgent.lot_id, hot_relaxed.lot_id)) == [
        hot_relaxed.lot_id, regular_urgent.lot_id,
    ]


def test_ls_negative_slack_dispatches_first():
    s = make_single_group_scenario(machine_count=4, mean_proc=60, release_rate=1e-3)
    st = sim.init(s, seed=0)
    st.clock = 100
    st.horizon = 10_000
    past_due = place_lot(st, due_date=40, queue_entry_time=90)   # slack 40-100-60 = -120
    ok = place_lot(st, due_date=400, queue_entry_time=90)        # slack +240
    assert rule_key("ls", st, past_due) < 0
    assert hierarchical_order("ls", st, (ok.lot_id, past_due.lot_id)) == [
        past_due.lot_id, ok.lot_id,
    ]


def test_unknown_rule_rejected():
    with pytest.raises(ValueError):
        HierarchicalDispatcher("lifo")
    with pytest.raises(ValueError):
        make_dispatcher("nope")


# --- policy dispatcher -------------------------------------------------------------


def _identity_normalizer():
    return Normalizer(
        mean=np.zeros(NUMERIC_FEATURES),
        std=np.ones(NUMERIC_FEATURES),
        sample_count=1,
        source_seed=0,
    )


def test_policy_dispatcher_single_lot():
    s = make_single_group_scenario(machine_count=2, release_rate=1e-3)
    st = sim.init(s, seed=0)
    st.horizon = 10_000
    lot = place_lot(st)
    d = policy_dispatcher(net.init_params(0, 1), _identity_normalizer())
    assert d(st, (lot.lot_id,)) == [lot.lot_id]


def test_policy_dispatcher_orders_by_descending_score():
    s = make_single_group_scenario(machine_count=4, release_rate=1e-3)
    st = sim.init(s, seed=0)
    st.clock = 100
    st.horizon = 10_000
    lots = [place_lot(st, due_date=d, queue_entry_time=50).lot_id for d in (100, 900, 400)]
    params = net.init_params(123, 1)
    d = PolicyDispatcher(params, _identity_normalizer())
    order = d(st, tuple(lots))
    x, fam = extract_matrix(st, lots)
    scores = net.forward_policy(params, net.LotBatch(x=x, fam=fam))
    by_score = [lots[i] for i in sorted(range(3), key=lambda i: (-scores[i], lots[i]))]
    assert order == by_score


def test_policy_dispatcher_presentation_order_invariant():
    s = make_single_group_scenario(machine_count=4, release_rate=1e-3)
    st = sim.init(s, seed=0)
    st.clock = 100
    st.horizon = 10_000
    lots = [place_lot(st, due_date=d, queue_entry_time=50).lot_id for d in (100, 900, 400, 250)]
    d = PolicyDispatcher(net.init_params(5, 1), _identity_normalizer())
    a = d(st, tuple(lots))
    b = d(st, tuple(reversed(lots)))
    assert a == b
