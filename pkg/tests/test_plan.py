import copy
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxplan.blocks import generate_blocks
from ctxplan.hypergraph import Infeasible
from ctxplan.model import Batch, DeviceTopology, SequenceSpec
from ctxplan.placement import communication_volume, place, placement_from_assignment
from ctxplan.plan import (ATTENTION, COPY, LAUNCH, WAIT, BufferManager, BufferOverflow, ExecutionPlan, PlanError,
                          allocate_intervals, compile_plans, verify_plans)
from ctxplan.scheduler import schedule
from fixtures import short_whole_long_split, three_sequences
from test_placement import small_batches


def test_first_fit_reuses_lowest_freed_index():
    m = BufferManager()
    assert [m.allocate() for _ in range(3)] == [0, 1, 2]
    m.free(1)
    assert m.allocate() == 1
    assert m.capacity == 3


def test_disjoint_lifetimes_share_one_slot():
    idx, cap = allocate_intervals([(0, 1), (2, 3), (4, 4), (5, 9)])
    assert cap == 1 and idx == [0, 0, 0, 0]


def test_touching_lifetimes_do_not_share():
    idx, cap = allocate_intervals([(0, 2), (2, 3)])
    assert cap == 2


@given(st.lists(st.tuples(st.integers(0, 30), st.integers(0, 8)), min_size=1, max_size=40))
def test_allocation_never_overlaps(raw):
    iv = [(s, s + d) for s, d in raw]
    idx, cap = allocate_intervals(iv)
    assert cap <= len(iv)
    # capacity equals the peak number of simultaneously live intervals
    peak = max(sum(1 for s, e in iv if s <= t <= e) for t in range(0, 40))
    assert cap == peak
    for i in range(len(iv)):
        for j in range(i + 1, len(iv)):
            if idx[i] == idx[j]:
                (a, b), (c, d) = iv[i], iv[j]
                assert b < c or d < a


def one_block_batch():
    return Batch((SequenceSpec("a", 2),), heads=1, kv_groups=1, head_dim=2)


def test_single_block_plan_is_attention_then_copy():
    g = generate_blocks(one_block_batch(), 2)
    pl = place(g, DeviceTopology.flat(1))
    (p,) = compile_plans(schedule(g, pl, 4))
    assert [i["op"] for i in p.instructions] == [ATTENTION, COPY]


def test_one_kv_exchange_pairs_send_with_wait():
    # tiles 0,1 on device 0 and 1; the comp (1, 0) on device 1 needs KV tile 0 from device 0
    g = generate_blocks(one_block_batch(), 1)
    assert g.num_comp == 3
    tiles = {c.id: (c.q_tile, c.kv_tile) for c in g.comp_blocks}
    comp_dev = [0 if tiles[c] == (0, 0) else 1 for c in range(g.num_comp)]
    pl = placement_from_assignment(g, DeviceTopology.flat(2), comp_dev + [0, 1])
    plans = compile_plans(schedule(g, pl, 2))
    verify_plans(plans, g, pl)
    sends = [i for i in plans[0].instructions if i["op"] == LAUNCH and i["direction"] == "send"]
    assert len(sends) == 1 and sends[0]["kind"] == "KV"
    waits = [i for i in plans[1].instructions if i["op"] == WAIT and i["tag"] == sends[0]["tag"]]
    assert len(waits) == 1


def test_plan_bytes_equal_volume():
    g = three_sequences()
    pl = short_whole_long_split(g)
    plans = compile_plans(schedule(g, pl, 2))
    verify_plans(plans, g, pl)
    assert sum(p.bytes_sent() for p in plans) == communication_volume(g, pl).total


@given(small_batches(), st.sampled_from([2, 4]), st.sampled_from([2, 4]))
@settings(max_examples=30, deadline=None)
def test_compiled_plans_verify(bb, R, T):
    batch, bs = bb
    g = generate_blocks(batch, bs)
    try:
        pl = place(g, DeviceTopology.flat(R), eps_data=0.5)
    except Infeasible:
        return
    plans = compile_plans(schedule(g, pl, T))
    verify_plans(plans, g, pl)
    assert sum(p.bytes_sent() for p in plans) == communication_volume(g, pl).total
    for p in plans:
        live = {}
        for row in p.buffers.table:
            live.setdefault((row["kind"], row["index"]), []).append(tuple(row["live"]))
        for spans in live.values():
            spans.sort()
            assert all(a[1] < b[0] for a, b in zip(spans, spans[1:]))


def test_order_within_division():
    g = three_sequences()
    pl = short_whole_long_split(g)
    plans = compile_plans(schedule(g, pl, 3))
    for p in plans:
        for t in range(3):
            ops = [i["op"] for i in p.instructions if i["division"] == t]
            launches = [k for k, op in enumerate(ops) if op == LAUNCH]
            attn = [k for k, op in enumerate(ops) if op == ATTENTION]
            waits = [k for k, op in enumerate(ops) if op == WAIT]
            if launches and attn:
                assert max(launches) < min(attn)
            if waits and attn:
                assert max(attn) < min(waits)


def test_verifier_catches_tampering():
    g = three_sequences()
    pl = short_whole_long_split(g)
    plans = compile_plans(schedule(g, pl, 2))
    bad = copy.deepcopy(plans)
    k = next(k for k, i in enumerate(bad[0].instructions) if i["op"] == WAIT)
    del bad[0].instructions[k]
    with pytest.raises(PlanError):
        verify_plans(bad, g, pl)
    bad = copy.deepcopy(plans)
    att = next(i for i in bad[1].instructions if i["op"] == ATTENTION)
    att["items"][0]["q"] += 50
    with pytest.raises(PlanError):
        verify_plans(bad, g, pl)
    bad = copy.deepcopy(plans)
    cp = next(i for i in bad[0].instructions if i["op"] == COPY)
    bad[0].instructions.remove(cp)
    bad[0].outputs = []
    with pytest.raises(PlanError):
        verify_plans(bad, g, pl)


def test_json_round_trip_and_determinism():
    g = three_sequences()
    pl = short_whole_long_split(g)
    a = compile_plans(schedule(g, pl, 4))
    b = compile_plans(schedule(g, pl, 4))
    assert [p.dumps() for p in a] == [p.dumps() for p in b]
    back = [ExecutionPlan.from_json(json.loads(p.dumps())) for p in a]
    assert [p.dumps() for p in back] == [p.dumps() for p in a]
    verify_plans(back, g, pl)
    with pytest.raises(PlanError):
        ExecutionPlan.from_json(json.loads(a[0].dumps()) | {"version": 99})


def test_tags_name_iteration_division_and_peers():
    g = three_sequences()
    pl = short_whole_long_split(g)
    plans = compile_plans(schedule(g, pl, 2), iteration=7)
    tags = [i["tag"] for p in plans for i in p.instructions if i["op"] == LAUNCH]
    assert tags and all(t.startswith("7.") for t in tags)
    assert all(">" in t.split(".")[2] for t in tags)


def test_buffer_limit():
    g = three_sequences()
    pl = short_whole_long_split(g)
    with pytest.raises(BufferOverflow):
        compile_plans(schedule(g, pl, 2), max_buffers={"O": 1})
