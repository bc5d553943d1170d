"""Command line: generate data, plan, simulate, compare against baselines, sweep."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from .baselines import dp_placement, ring_makespan, ring_placement, zigzag_placement
from .blocks import generate_blocks
from .datasets import DISTRIBUTIONS, MASKS, synthetic_stream
from .hypergraph import Infeasible
from .model import read_batch_jsonl, write_batch_jsonl
from .pipeline import BLOCK_SIZES, PipelineConfig, make_batches, pipeline_run, plan_batch
from .placement import communication_volume, place
from .scheduler import schedule, schedule_cost
from .sweeps import block_size_sweep, epsilon_sweep, sparsity_sweep

BASELINES = {"ring": ring_placement, "zigzag": zigzag_placement, "dp": dp_placement}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("input", help="batch JSONL: header line, then one sequence per line")
    p.add_argument("--block-size", type=int, default=1024)
    p.add_argument("--divisions", type=int, default=4)
    p.add_argument("--eps-inter", type=float, default=0.4)
    p.add_argument("--eps-intra", type=float, default=0.1)
    p.add_argument("--eps-data", type=float, default=0.05)
    p.add_argument("--lookahead", type=int, default=2)
    p.add_argument("--machines", type=int, default=1)
    p.add_argument("--devices-per-machine", type=int, default=4)
    p.add_argument("--token-budget", type=int, default=None, help="defaults to the input header's budget")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("out"))
    p.add_argument("--numeric", action="store_true", help="simulate with real values and check them")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ctxplan", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)
    for name in ("plan", "simulate"):
        _common(sub.add_parser(name))
    cmp_ = sub.add_parser("compare")
    _common(cmp_)
    cmp_.add_argument("--baseline", choices=sorted(BASELINES), default="ring")
    sw = sub.add_parser("sweep")
    _common(sw)
    sw.add_argument("--param", choices=("block_size", "epsilon", "sparsity"), required=True)
    sw.add_argument("--values", type=float, nargs="+", default=None)
    gen = sub.add_parser("gen-data")
    gen.add_argument("--dist", choices=sorted(DISTRIBUTIONS), default="longalign")
    gen.add_argument("--scale", type=float, default=1.0)
    gen.add_argument("--count", type=int, default=256)
    gen.add_argument("--mask", choices=MASKS + ("mixed",), default="causal")
    gen.add_argument("--max-len", type=int, default=None)
    gen.add_argument("--heads", type=int, default=8)
    gen.add_argument("--kv-groups", type=int, default=2)
    gen.add_argument("--head-dim", type=int, default=128)
    gen.add_argument("--token-budget", type=int, default=131072)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", type=Path, default=Path("data.jsonl"))
    return ap


def _config(args, mode: str, header: dict) -> PipelineConfig:
    return PipelineConfig(
        block_size=args.block_size, divisions=args.divisions, eps_inter=args.eps_inter, eps_intra=args.eps_intra,
        eps_data=args.eps_data, lookahead=args.lookahead, seed=args.seed, machines=args.machines,
        devices_per_machine=args.devices_per_machine,
        token_budget=args.token_budget or int(header.get("token_budget") or 131072), mode=mode,
        heads=int(header.get("heads", 8)), kv_groups=int(header.get("kv_groups", 2)),
        head_dim=int(header.get("head_dim", 128)), bytes_per_element=int(header.get("bytes_per_element", 2)),
        numeric=args.numeric)


def _load(args, mode: str):
    header, stream = read_batch_jsonl(args.input)
    cfg = _config(args, mode, header)
    return cfg, list(make_batches(stream, cfg.token_budget))


def _write_rows(path: Path, rows: list[dict]) -> None:
    keys = sorted({k for r in rows for k, v in r.items() if not isinstance(v, (dict, list))})
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, keys, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def cmd_gen(args) -> int:
    seqs = synthetic_stream(args.dist, args.count, args.seed, args.scale, args.mask, args.max_len)
    header = {"heads": args.heads, "kv_groups": args.kv_groups, "head_dim": args.head_dim,
              "token_budget": args.token_budget, "bytes_per_element": 2}
    write_batch_jsonl(args.out, header, seqs)
    print(f"wrote {len(seqs)} sequences to {args.out}")
    return 0


def cmd_pipeline(args, mode: str) -> int:
    cfg, batches = _load(args, mode)
    res = pipeline_run(cfg, batches)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "reports.json").write_text(res.dumps())
    (args.out / "reports.csv").write_text(res.to_csv())
    failed = sum("error" in r for r in res.reports)
    print(f"{len(res.reports)} iterations, {failed} failed; reports in {args.out}")
    return 1 if failed == len(res.reports) and failed else 0


def cmd_plan(args) -> int:
    """Plan every batch and write placement, schedule and per-device plans."""
    cfg, batches = _load(args, "plan")
    for i, seqs in enumerate(batches):
        d = args.out / f"iter{i:04d}"
        d.mkdir(parents=True, exist_ok=True)
        try:
            g, pl, s, plans = plan_batch(cfg, seqs, i)
        except Infeasible as e:
            (d / "error.txt").write_text(str(e) + "\n")
            print(f"iteration {i}: {e}", file=sys.stderr)
            continue
        (d / "blocks.json").write_text(g.dumps())
        (d / "placement.json").write_text(pl.dumps())
        (d / "schedule.json").write_text(s.dumps())
        for p in plans:
            (d / f"device{p.device}.json").write_text(p.dumps())
    print(f"planned {len(batches)} batches into {args.out}")
    return 0


def cmd_compare(args) -> int:
    cfg, batches = _load(args, "compare")
    topo = cfg.topology
    rows = []
    for i, seqs in enumerate(batches):
        g = generate_blocks(cfg.batch(seqs), cfg.block_size)
        row = {"iteration": i, "baseline": args.baseline}
        try:
            planned = place(g, topo, cfg.eps_inter, cfg.eps_intra, cfg.eps_data, seed=cfg.seed + i)
            row["planner_comm_bytes"] = communication_volume(g, planned).total
            row["planner_makespan"] = schedule_cost(schedule(g, planned, cfg.divisions), topo)["makespan"]
            row["planner_flops_max_over_mean"] = planned.balance()["flops_max_over_mean"]
        except Infeasible as e:
            row["planner_error"] = str(e)
        try:
            if args.baseline == "dp":
                base = dp_placement(g, topo.num_devices, cfg.eps_data, topo)
            else:
                base = BASELINES[args.baseline](g, topo.num_devices, topo)
            row["baseline_comm_bytes"] = communication_volume(g, base).total
            row["baseline_flops_max_over_mean"] = base.balance()["flops_max_over_mean"]
            if base.fixed_schedule:
                row.update({f"ring_{k}": v for k, v in base.fixed_schedule.items()})
                row["baseline_makespan"] = ring_makespan(g, base, topo)["makespan"]
            else:
                row["baseline_makespan"] = schedule_cost(schedule(g, base, cfg.divisions), topo)["makespan"]
        except Infeasible as e:
            row["baseline_error"] = str(e)
        rows.append(row)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / f"compare_{args.baseline}.json").write_text(json.dumps(rows, sort_keys=True, indent=1))
    _write_rows(args.out / f"compare_{args.baseline}.csv", rows)
    print(f"compared {len(rows)} batches against {args.baseline}; results in {args.out}")
    return 0


def cmd_sweep(args) -> int:
    cfg, batches = _load(args, "sweep")
    topo = cfg.topology
    rows = []
    for i, seqs in enumerate(batches):
        batch = cfg.batch(seqs)
        if args.param == "block_size":
            vals = [int(v) for v in args.values] if args.values else list(BLOCK_SIZES)
            out = block_size_sweep(batch, vals, topo, cfg.eps_inter, cfg.eps_intra, cfg.eps_data, cfg.seed + i)
        elif args.param == "epsilon":
            vals = args.values or [0.05, 0.1, 0.2, 0.4, 0.8]
            out = epsilon_sweep(batch, cfg.block_size, vals, topo, cfg.eps_data, cfg.seed + i)
        else:
            vals = args.values or [0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0]
            out = sparsity_sweep(batch, cfg.block_size, vals, topo, cfg.eps_inter, cfg.eps_intra, cfg.eps_data,
                                 cfg.seed + i)
        rows += [{"iteration": i} | r for r in out]
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / f"sweep_{args.param}.json").write_text(json.dumps(rows, sort_keys=True, indent=1))
    _write_rows(args.out / f"sweep_{args.param}.csv", rows)
    print(f"swept {args.param} over {len(batches)} batches; results in {args.out}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.cmd == "gen-data":
        return cmd_gen(args)
    if args.cmd == "plan":
        return cmd_plan(args)
    if args.cmd == "simulate":
        return cmd_pipeline(args, "simulate")
    if args.cmd == "compare":
        return cmd_compare(args)
    return cmd_sweep(args)


if __name__ == "__main__":
    sys.exit(main())
