"""Every acceptance criterion at its stated tolerance; one PASS/FAIL line each."""

import time
from functools import lru_cache

import numpy as np
from scipy.stats import spearmanr

from ctxplan.baselines import ring_makespan, ring_placement
from ctxplan.blocks import generate_blocks
from ctxplan.datasets import synthetic_stream
from ctxplan.hypergraph import Infeasible, build_hypergraph, partition_heuristic
from ctxplan.model import MASK_KINDS, Batch, DeviceTopology
from ctxplan.pipeline import pipeline_run
from ctxplan.placement import communication_volume, place
from ctxplan.scheduler import schedule, schedule_cost
from ctxplan.sweeps import block_size_sweep, epsilon_sweep, fraction_monotone, sparsity_sweep
from fixtures import all_sequences_split, shared_question_ring, short_whole_long_split, three_sequences, \
    three_tile_question
from fuzz import fuzz_suite, quality_suite
from test_pipeline import tiny_batches, tiny_config


@lru_cache(maxsize=None)
def timed_fuzz():
    t = time.perf_counter()
    cases = fuzz_suite()
    return cases, time.perf_counter() - t


def feasible_cases():
    return [c for c in timed_fuzz()[0] if c.feasible]


def test_c1_numeric_equivalence(verdict):
    cases, secs = timed_fuzz()
    ok = feasible_cases()
    worst = max(c.max_abs_error for c in ok)
    kinds = set().union(*(c.mask_kinds for c in ok))
    covered = ({c.R for c in ok} == {1, 2, 4, 8} and kinds == set(MASK_KINDS)
               and {c.block_size for c in ok} == {1, 2, 8, 64})
    shape = all(max(s.length for s in c.batch.sequences) <= 512 and c.batch.heads <= 4 and c.batch.head_dim <= 16
                for c in ok)
    verdict("criterion 1 numeric equivalence",
            len(ok) >= 200 and worst <= 1e-8 and secs <= 300 and covered and shape,
            f"{len(ok)} configs, max abs error {worst:.2e}, {secs:.0f}s, full coverage {covered}")


def test_c2_bytes_equal_connectivity(verdict):
    ok = feasible_cases()
    bad = [c.index for c in ok if not (c.sim_bytes == c.connectivity == c.comm_volume)]
    verdict("criterion 2 communication identity", not bad and len(ok) >= 200,
            f"{len(ok) - len(bad)}/{len(ok)} exact")


def test_c3_mixed_placement_halves_comm(verdict):
    g = three_sequences()
    cp = communication_volume(g, all_sequences_split(g)).total
    mixed = communication_volume(g, short_whole_long_split(g)).total
    planned = communication_volume(g, place(g, DeviceTopology.flat(2), eps_intra=0.1, eps_data=0.05)).total
    verdict("criterion 3 mixed placement", 2 * mixed == cp and planned <= mixed,
            f"pure CP {cp}, mixed {mixed}, planner {planned}")


def test_c4_ring_redundancy(verdict):
    g = shared_question_ring()
    st = ring_placement(g, 4).fixed_schedule
    planned = communication_volume(g, place(g, DeviceTopology.flat(4))).transfers["KV"]
    verdict("criterion 4 ring redundancy",
            st["kv_transfers"] == 48 and st["redundant_kv_transfers"] == 38 and planned <= 10,
            f"ring {st['kv_transfers']} transfers, {st['redundant_kv_transfers']} redundant, planner {planned}")


def test_c5_nine_hyperedges(verdict):
    h = build_hypergraph(three_tile_question())
    verdict("criterion 5 hyperedge count", h.num_edges == 9, f"{h.num_edges} hyperedges")


def test_c6_balance(verdict):
    cases = timed_fuzz()[0]
    ok = feasible_cases()
    silent = sum(not all(c.balanced_levels) for c in ok)
    explicit = sum(not c.feasible and bool(c.error) for c in cases)
    unexplained = len(cases) - len(ok) - explicit
    verdict("criterion 6 balance", silent == 0 and unexplained == 0,
            f"{len(ok)} balanced, {explicit} explicit errors, {silent} silent violations")


def test_c7_scheduler_rules(verdict):
    ok = feasible_cases()
    bad = [c.index for c in ok if c.schedule_problems]
    verdict("criterion 7 scheduler rules", not bad, f"{len(ok) - len(bad)}/{len(ok)} schedules compliant")


def test_c8_heuristic_quality(verdict):
    suite = quality_suite()
    ratios, equal, monotone = [], 0, True
    for i, (h, R, ec, ed, opt) in enumerate(suite):
        p = partition_heuristic(h, R, ec, ed, seed=i)
        ratios.append(p.cost / opt.cost if opt.cost else (1.0 if p.cost == 0 else float("inf")))
        equal += p.cost == opt.cost
        monotone &= all(all(a >= b for a, b in zip(run, run[1:])) for run in p.trace)
    small = all(h.num_vertices <= 14 for h, *_ in suite)
    verdict("criterion 8 heuristic quality",
            len(suite) == 100 and small and max(ratios) <= 2 and equal >= 60 and monotone,
            f"worst ratio {max(ratios):.2f}, optimal in {equal}/{len(suite)}, monotone passes {monotone}")


SWEEP_TOPO = DeviceTopology(2, 2)
SWEEP_BATCHES = 8


def sweep_batches():
    stream = synthetic_stream("longalign", 6 * SWEEP_BATCHES, seed=11, scale=1 / 32)
    return [Batch(tuple(stream[6 * i:6 * i + 6]), heads=1, kv_groups=1, head_dim=8)
            for i in range(SWEEP_BATCHES)]


def test_c9_sparsity_trend(verdict):
    rhos = []
    for i, b in enumerate(sweep_batches()):
        rows = sparsity_sweep(b, 32, [0.05, 0.1, 0.2, 0.3, 0.4, 0.6, 0.8, 1.0], SWEEP_TOPO, eps_data=0.2, seed=i)
        rows = [r for r in rows if "comm_bytes" in r]
        rhos.append(spearmanr([r["sparsity"] for r in rows], [r["comm_bytes"] for r in rows])[0])
    verdict("criterion 9a sparsity correlation", min(rhos) >= 0.9,
            f"Spearman per batch min {min(rhos):.3f}, mean {np.mean(rhos):.3f} over {len(rhos)} batches")


def test_c9_block_size_trend(verdict):
    series = []
    for i, b in enumerate(sweep_batches()):
        rows = block_size_sweep(b, [16, 32, 64, 128], SWEEP_TOPO, eps_data=0.2, seed=i)
        series.append([r["comm_bytes"] for r in rows if "comm_bytes" in r])
    frac = fraction_monotone(series, increasing=True)
    verdict("criterion 9b block size trend", frac >= 0.9, f"non-decreasing on {frac:.0%} of batches")


def test_c9_epsilon_trend(verdict):
    series = []
    for i, b in enumerate(sweep_batches()):
        rows = epsilon_sweep(b, 32, [0.05, 0.1, 0.2, 0.4, 0.8], SWEEP_TOPO, eps_data=0.2, seed=i)
        series.append([r["comm_bytes"] for r in rows if "comm_bytes" in r])
    frac = fraction_monotone(series, increasing=False)
    verdict("criterion 9c imbalance tolerance trend", frac >= 0.9, f"non-increasing on {frac:.0%} of batches")


def test_c10_pipeline_contract(verdict):
    k = 2
    a = pipeline_run(tiny_config(lookahead=k, seed=3), tiny_batches(50, seed=2))
    b = pipeline_run(tiny_config(lookahead=k, seed=3), tiny_batches(50, seed=2))
    problems = a.events.check(k) + b.events.check(k)
    same = a.dumps() == b.dumps()
    verdict("criterion 10 pipeline contract", len(a.reports) == 50 and not problems and same,
            f"{len(a.reports)} iterations, {len(problems)} contract violations, identical reports {same}")


def test_modeled_makespan_against_ring(verdict):
    topo = DeviceTopology(2, 2, intra_bw=10e9, inter_bw=1e9, flops_per_sec=1e12)
    stream = synthetic_stream("longalign", 80, seed=5, scale=1 / 16)
    wins = total = 0
    for i in range(20):
        b = Batch(tuple(stream[4 * i:4 * i + 4]), heads=2, kv_groups=1, head_dim=64)
        g = generate_blocks(b, 64)
        try:
            pl = place(g, topo, eps_data=0.2, seed=i)
        except Infeasible:
            continue
        total += 1
        mine = schedule_cost(schedule(g, pl, 4), topo)["makespan"]
        wins += mine <= ring_makespan(g, ring_placement(g, 4, topo), topo)["makespan"]
    verdict("makespan note", total >= 18 and wins >= 0.9 * total,
            f"planner makespan <= ring on {wins}/{total} comm-bound fixtures")
