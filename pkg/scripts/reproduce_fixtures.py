"""Print the hand-checkable fixtures: mixed vs split placement, ring redundancy, hyperedge count."""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))

from ctxplan.baselines import ring_placement  # noqa: E402
from ctxplan.hypergraph import build_hypergraph, partition_exhaustive  # noqa: E402
from ctxplan.model import DeviceTopology  # noqa: E402
from ctxplan.placement import communication_volume, place  # noqa: E402
from ctxplan.scheduler import schedule, schedule_cost  # noqa: E402
from fixtures import (all_sequences_split, shared_question_ring, short_whole_long_split,  # noqa: E402
                      three_sequences, three_tile_question)


def main():
    g = three_sequences()
    slow = DeviceTopology.flat(2, intra_bw=1.0, latency_intra=0.0)
    print("three sequences on two devices")
    for name, pl in (("all split", all_sequences_split(g)), ("short whole", short_whole_long_split(g)),
                     ("planner", place(g, DeviceTopology.flat(2), eps_intra=0.1))):
        cost = schedule_cost(schedule(g, pl, 4), slow)
        print(f"  {name:12s} bytes={communication_volume(g, pl).total:3d} flops={pl.balance()['flops']}"
              f" makespan(1 B/s)={cost['makespan']:.1f}")

    q = shared_question_ring()
    st = ring_placement(q, 4).fixed_schedule
    planned = communication_volume(q, place(q, DeviceTopology.flat(4))).transfers["KV"]
    print(f"shared question, 4 devices: ring moves {st['kv_transfers']} KV blocks, "
          f"{st['redundant_kv_transfers']} unneeded; planner moves {planned}")

    h = build_hypergraph(three_tile_question())
    opt = partition_exhaustive(h, 2, 0.4, 0.4)
    print(f"three-tile question: {h.num_vertices} vertices, {h.num_edges} hyperedges, "
          f"2-way optimum {opt.cost} bytes")


if __name__ == "__main__":
    main()
