"""Planner against ring, zigzag and whole-sequence placement on synthetic batches."""

import argparse

import numpy as np

from ctxplan.baselines import dp_placement, ring_makespan, ring_placement, zigzag_placement
from ctxplan.blocks import generate_blocks
from ctxplan.datasets import DISTRIBUTIONS, synthetic_stream
from ctxplan.hypergraph import Infeasible
from ctxplan.model import Batch, DeviceTopology
from ctxplan.placement import communication_volume, place
from ctxplan.scheduler import schedule, schedule_cost


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--dist", choices=sorted(DISTRIBUTIONS), default="longalign")
    ap.add_argument("--batches", type=int, default=20)
    ap.add_argument("--per-batch", type=int, default=4)
    ap.add_argument("--scale", type=float, default=1 / 16)
    ap.add_argument("--mask", default="causal")
    ap.add_argument("--block-size", type=int, default=64)
    ap.add_argument("--inter-bw", type=float, default=1e9)
    ap.add_argument("--seed", type=int, default=5)
    args = ap.parse_args()

    topo = DeviceTopology(2, 2, intra_bw=10e9, inter_bw=args.inter_bw, flops_per_sec=1e12)
    n = args.per_batch
    stream = synthetic_stream(args.dist, n * args.batches, seed=args.seed, scale=args.scale, mask=args.mask)
    print(f"{'batch':>5} {'planner MB':>10} {'ring MB':>8} {'planner ms':>10} {'ring ms':>8} "
          f"{'zigzag imb':>10} {'dp imb':>7}")
    speedups = []
    for i in range(args.batches):
        g = generate_blocks(Batch(tuple(stream[n * i:n * i + n]), heads=2, kv_groups=1, head_dim=64),
                            args.block_size)
        try:
            pl = place(g, topo, eps_data=0.2, seed=i)
        except Infeasible as e:
            print(f"{i:5d} infeasible: {e}")
            continue
        ring = ring_placement(g, 4, topo)
        mine = schedule_cost(schedule(g, pl, 4), topo)["makespan"]
        theirs = ring_makespan(g, ring, topo)["makespan"]
        try:
            dp = f"{dp_placement(g, 4, 0.2, topo).balance()['flops_max_over_mean']:7.2f}"
        except Infeasible:
            dp = "    n/a"
        speedups.append(theirs / mine)
        print(f"{i:5d} {communication_volume(g, pl).total / 1e6:10.2f} {ring.fixed_schedule['kv_bytes'] / 1e6:8.2f} "
              f"{mine * 1e3:10.3f} {theirs * 1e3:8.3f} "
              f"{zigzag_placement(g, 4, topo).balance()['flops_max_over_mean']:10.2f} {dp}")
    print(f"modeled speedup over ring: geometric mean {np.exp(np.mean(np.log(speedups))):.2f}, "
          f"min {min(speedups):.2f}, planner not slower on {np.mean(np.array(speedups) >= 1):.0%}")


if __name__ == "__main__":
    main()
