"""Fixed-configuration placements: ring and zigzag context parallelism, whole-sequence data parallelism."""

from __future__ import annotations

from collections import defaultdict

import numpy as np

from .blocks import KV, BlockGraph
from .hypergraph import Infeasible
from .model import DeviceTopology
from .placement import EPS_DATA, PlacementResult, communication_volume
from .scheduler import link_times, pipeline_makespan


def _topo(R: int, topo: DeviceTopology | None) -> DeviceTopology:
    if topo is None:
        return DeviceTopology.flat(R)
    if topo.num_devices != R:
        raise ValueError(f"topology has {topo.num_devices} devices, expected {R}")
    return topo


def _from_tiles(g: BlockGraph, topo: DeviceTopology, tile_device, name: str) -> PlacementResult:
    """Groups follow ``tile_device(seq, tile, ntiles)``; computation sits with its Q block."""
    group_dev = np.array([tile_device(si, t, len(g.tile_bounds[si]) - 1) for si, t in g.group_key], dtype=np.int64)
    data_dev = group_dev[g.group_of]
    comp_dev = np.array([data_dev[c.q_block] for c in g.comp_blocks], dtype=np.int64)
    return PlacementResult(g, topo, group_dev, comp_dev, name=name)


def ring_chunk(tile: int, ntiles: int, R: int) -> int:
    """Chunk ``i`` of ``R`` equal chunks; the last device takes the remainder."""
    return min(tile // max(1, ntiles // R), R - 1)


def zigzag_chunk(tile: int, ntiles: int, R: int) -> int:
    """Device holding chunk ``c`` of ``2R``: chunks ``i`` and ``2R-1-i`` share device ``i``."""
    c = min(tile // max(1, ntiles // (2 * R)), 2 * R - 1)
    return c if c < R else 2 * R - 1 - c


def ring_stats(g: BlockGraph, pl: PlacementResult) -> dict:
    """Mask-oblivious ring: every KV block visits every other device over ``R-1`` steps."""
    R = pl.num_devices
    kv = [b for b in g.data_blocks if b.kind == KV]
    needed = communication_volume(g, pl).transfers[KV]
    ring = (R - 1) * len(kv)
    return {"steps": R - 1, "kv_transfers": ring, "needed_kv_transfers": needed,
            "redundant_kv_transfers": ring - needed,
            "kv_bytes": (R - 1) * sum(b.size_bytes for b in kv)}


def ring_placement(g: BlockGraph, R: int, topo: DeviceTopology | None = None) -> PlacementResult:
    topo = _topo(R, topo)
    pl = _from_tiles(g, topo, lambda si, t, n: ring_chunk(t, n, R), "ring")
    pl.fixed_schedule = ring_stats(g, pl)
    return pl


def zigzag_placement(g: BlockGraph, R: int, topo: DeviceTopology | None = None) -> PlacementResult:
    topo = _topo(R, topo)
    pl = _from_tiles(g, topo, lambda si, t, n: zigzag_chunk(t, n, R), "zigzag")
    pl.fixed_schedule = ring_stats(g, pl)
    return pl


def dp_assignment(lengths, R: int, cap: float) -> list[int]:
    """Longest-first packing of whole sequences onto the least-loaded device."""
    load = [0] * R
    out = [0] * len(lengths)
    for i in sorted(range(len(lengths)), key=lambda i: (-lengths[i], i)):
        if lengths[i] > cap:
            raise Infeasible(f"sequence {i} of {lengths[i]} tokens exceeds the per-device cap {cap:g}")
        d = min(range(R), key=lambda x: (load[x], x))
        out[i] = d
        load[d] += lengths[i]
    return out


def dp_placement(g: BlockGraph, R: int, eps_data: float = EPS_DATA,
                 topo: DeviceTopology | None = None) -> PlacementResult:
    topo = _topo(R, topo)
    budget = g.batch.token_budget or g.batch.total_tokens
    dev = dp_assignment([s.length for s in g.batch.sequences], R, budget / R * (1 + eps_data))
    return _from_tiles(g, topo, lambda si, t, n: dev[si], "dp")


def ring_makespan(g: BlockGraph, pl: PlacementResult, topo: DeviceTopology | None = None) -> dict:
    """Modeled time of the fixed ring: step ``s`` computes against KV from ``r - s``.

    Every step ships each device's whole KV shard to its successor while the previous
    step computes.
    """
    topo = topo or pl.topology
    R = pl.num_devices
    data_dev = pl.data_device
    flops = np.zeros((R, R))
    for c in g.comp_blocks:
        r = int(pl.comp_device[c.id])
        s = (r - int(data_dev[c.kv_block])) % R
        flops[s, r] += c.flops
    comp = [float(flops[s].max()) / topo.flops_per_sec for s in range(R)]
    shard = defaultdict(int)
    for b in g.data_blocks:
        if b.kind == KV:
            shard[int(data_dev[b.id])] += b.size_bytes
    comm = [0.0]
    for s in range(1, R):
        # at step s device r holds the shard that started on r - s and got it from r - 1
        comm.append(link_times(topo, [((r - 1) % R, r, shard[(r - s) % R]) for r in range(R)]))
    return {"comp_time": comp, "comm_time": comm, "makespan": pipeline_makespan(comp, comm)}
