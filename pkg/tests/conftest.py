import random

import pytest

from fabsched import sim
from fabsched.scenario import (
    PriorityClass,
    PriorityMix,
    PriorityWeights,
    Product,
    RouteStep,
    Scenario,
    SetupTable,
    ToolFamily,
    ToolGroup,
    load_minifab,
)


@pytest.fixture(scope="session")
def minifab() -> Scenario:
    return load_minifab()


def make_single_group_scenario(
    machine_count=2,
    mean_proc=30,
    load_time=2,
    unload_time=2,
    setups=None,
    batch_min=1,
    batch_max=1,
    route_steps=None,
    release_rate=2.0,
    flow_factor=2.0,
) -> Scenario:
    """One family, one tool group, one product; knobs for targeted sim tests."""
    group = ToolGroup(
        group_id=0,
        family_id=0,
        machine_count=machine_count,
        batch_min=batch_min,
        batch_max=batch_max,
        load_time=load_time,
        unload_time=unload_time,
        setups=setups,
    )
    if route_steps is None:
        route_steps = (RouteStep(step_index=0, group_id=0, mean_proc_time=mean_proc),)
    product = Product(
        product_id=0,
        route=tuple(route_steps),
        release_rate=release_rate,
        priority_mix=PriorityMix(regular=1.0, hot=0.0, super_hot=0.0),
        flow_factor=flow_factor,
        wafer_count_range=(20, 20),
    )
    return Scenario(
        families=(ToolFamily(0, "solo"),),
        tool_groups=(group,),
        products=(product,),
        transport_delay_matrix=((0,),),
        priority_weights=PriorityWeights(),
        penalty=10.0,
        name="single-group",
    )


def place_lot(
    st: sim.FabState,
    product_id=0,
    step_index=0,
    priority=PriorityClass.REGULAR,
    queue_entry_time=0,
    due_date=1000,
    release_time=0,
    total_wait=0,
    wafer_count=20,
    cqt_deadline=None,
    dedications=None,
) -> sim.Lot:
    """Drop a hand-built lot straight into its step's queue."""
    lot = sim.Lot(
        lot_id=st.next_lot_id,
        product_id=product_id,
        priority=priority,
        release_time=release_time,
        due_date=due_date,
        wafer_count=wafer_count,
        step_index=step_index,
        queue_entry_time=queue_entry_time,
        total_wait=total_wait,
        cqt_deadline=cqt_deadline,
        dedications=dict(dedications or {}),
    )
    st.next_lot_id += 1
    st.lots[lot.lot_id] = lot
    st.released_count += 1
    group_id = st.scenario.product(product_id).route[step_index].group_id
    st.queues[group_id].append(lot.lot_id)
    return lot


def random_setup_table(rng: random.Random, n_setups: int, prefix: str) -> SetupTable:
    ids = tuple(f"{prefix}{i}" for i in range(n_setups))
    matrix = tuple(
        tuple(rng.randint(5, 12) if i == j else rng.randint(8, 40) for j in range(n_setups))
        for i in range(n_setups)
    )
    return SetupTable(setup_ids=ids, changeover_minutes=matrix)
