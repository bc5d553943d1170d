"""Hierarchical (machine, then device) placement of blocks and the resulting communication volume."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .blocks import O, BlockGraph
from .hypergraph import Hypergraph, Infeasible, build_hypergraph, connectivity_cost, partition_heuristic
from .model import DeviceTopology

EPS_INTER = 0.4
EPS_INTRA = 0.1
EPS_DATA = 0.05


@dataclass(eq=False)
class PlacementResult:
    graph: BlockGraph
    topology: DeviceTopology
    group_device: np.ndarray
    comp_device: np.ndarray
    inter_machine_bytes: int = 0
    intra_machine_bytes: int = 0
    partitions: list = field(default_factory=list)  # (level, machine, Hypergraph, Partition)
    name: str = "planner"
    fixed_schedule: dict | None = None  # baselines with a mask-oblivious ring schedule

    @property
    def num_devices(self) -> int:
        return self.topology.num_devices

    @property
    def data_device(self) -> np.ndarray:
        return self.group_device[self.graph.group_of]

    def vertex_assignment(self) -> np.ndarray:
        """Device of every vertex of ``build_hypergraph(graph)``."""
        return np.concatenate([self.comp_device, self.group_device]).astype(np.int64)

    def balance(self) -> dict:
        R = self.num_devices
        flops = np.zeros(R, dtype=np.int64)
        data = np.zeros(R, dtype=np.int64)
        for c in self.graph.comp_blocks:
            flops[self.comp_device[c.id]] += c.flops
        for d in self.graph.data_blocks:
            data[self.group_device[self.graph.group_of[d.id]]] += d.size_bytes
        return {
            "flops": flops.tolist(), "bytes": data.tolist(),
            "flops_max_over_mean": float(flops.max() / flops.mean()) if flops.sum() else 1.0,
            "bytes_max_over_mean": float(data.max() / data.mean()) if data.sum() else 1.0,
        }

    def token_manifest(self) -> dict[int, list[dict]]:
        """Tokens each device holds as local model input."""
        seqs = self.graph.batch.sequences
        out: dict[int, list[dict]] = {d: [] for d in range(self.num_devices)}
        for gi, (si, tile) in enumerate(self.graph.group_key):
            b = self.graph.tile_bounds[si]
            out[int(self.group_device[gi])].append(
                {"seq_id": seqs[si].seq_id, "start": int(b[tile]), "end": int(b[tile + 1])})
        return out

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "machines": self.topology.machines,
            "devices_per_machine": self.topology.devices_per_machine,
            "data_block_device": self.data_device.tolist(),
            "comp_block_device": self.comp_device.tolist(),
            "inter_machine_bytes": int(self.inter_machine_bytes),
            "intra_machine_bytes": int(self.intra_machine_bytes),
            "balance": self.balance(),
            "token_manifest": {str(k): v for k, v in self.token_manifest().items()},
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def place(g: BlockGraph, topo: DeviceTopology, eps_inter: float = EPS_INTER, eps_intra: float = EPS_INTRA,
          eps_data: float = EPS_DATA, seed: int = 0, warm_start: np.ndarray | None = None,
          hypergraph: Hypergraph | None = None) -> PlacementResult:
    """Partition across machines, then each machine's induced sub-hypergraph across its devices.

    ``warm_start`` is a device per hypergraph vertex (e.g. a projected coarser plan). When given,
    it is refined at the device level with its machine split frozen, and whichever of that and
    the fresh hierarchical result moves fewer total bytes is returned.
    """
    h = hypergraph if hypergraph is not None else build_hypergraph(g)
    fresh = _hierarchical(g, h, topo, eps_inter, eps_intra, eps_data, seed, None)
    if warm_start is None:
        return fresh
    warm_machine = np.asarray(warm_start) // topo.devices_per_machine
    try:
        warm = _hierarchical(g, h, topo, eps_inter, eps_intra, eps_data, seed, np.asarray(warm_start),
                             fixed_machine=warm_machine)
    except Infeasible:
        return fresh
    if communication_volume(g, warm).total < communication_volume(g, fresh).total:
        return warm
    return fresh


def _hierarchical(g, h, topo, eps_inter, eps_intra, eps_data, seed, warm, fixed_machine=None):
    X, Y = topo.machines, topo.devices_per_machine
    parts = []
    if fixed_machine is not None:
        machine = np.asarray(fixed_machine, dtype=np.int64)
        inter = connectivity_cost(h, machine) if X > 1 else 0
    elif X == 1:
        machine = np.zeros(h.num_vertices, dtype=np.int64)
        inter = 0
    else:
        try:
            p1 = partition_heuristic(h, X, eps_inter, eps_data, seed=seed)
        except Infeasible as e:
            raise Infeasible(f"machine level: {e}") from None
        machine, inter = p1.assignment, p1.cost
        parts.append(("machine", -1, h, p1))

    device = np.zeros(h.num_vertices, dtype=np.int64)
    intra = 0
    for m in range(X):
        verts = np.flatnonzero(machine == m)
        if len(verts) == 0:
            continue
        sub, idx = h.induced(verts)
        initial = None
        if warm is not None:
            initial = np.clip(warm[idx] - m * Y, 0, Y - 1)
        try:
            p2 = partition_heuristic(sub, Y, eps_intra, eps_data, seed=seed + 1 + m, initial=initial)
        except Infeasible as e:
            raise Infeasible(f"device level, machine {m}: {e}") from None
        device[idx] = m * Y + p2.assignment
        intra += p2.cost
        parts.append(("device", m, sub, p2))
    C = g.num_comp
    return PlacementResult(g, topo, device[C:].copy(), device[:C].copy(), int(inter), int(intra), parts)


def placement_from_assignment(g: BlockGraph, topo: DeviceTopology, assignment, name: str = "planner"):
    a = np.asarray(assignment, dtype=np.int64)
    C = g.num_comp
    return PlacementResult(g, topo, a[C:].copy(), a[:C].copy(), name=name)


@dataclass
class CommVolume:
    total: int
    per_device_send: np.ndarray
    per_device_recv: np.ndarray
    inter_machine: int
    transfers: dict  # block kind -> number of (block, device) transfers

    def to_json(self) -> dict:
        return {"total": int(self.total), "per_device_send": self.per_device_send.tolist(),
                "per_device_recv": self.per_device_recv.tolist(), "inter_machine": int(self.inter_machine),
                "transfers": dict(self.transfers)}


def communication_volume(g: BlockGraph, pl: PlacementResult, dedup: bool = True) -> CommVolume:
    """Bytes moved: remote inputs fetched to each computation block, remote outputs sent back.

    With ``dedup`` a block travels to a given device once no matter how many of that
    device's computation blocks touch it.
    """
    R = pl.num_devices
    topo = pl.topology
    data_dev = pl.data_device
    send = np.zeros(R, dtype=np.int64)
    recv = np.zeros(R, dtype=np.int64)
    inter = 0
    transfers = {"Q": 0, "KV": 0, "O": 0}
    seen = set()
    for c in g.comp_blocks:
        dc = int(pl.comp_device[c.id])
        for b in (c.q_block, c.kv_block, c.o_block):
            owner = int(data_dev[b])
            if owner == dc:
                continue
            if dedup:
                if (b, dc) in seen:
                    continue
                seen.add((b, dc))
            blk = g.data_blocks[b]
            src, dst = (dc, owner) if blk.kind == O else (owner, dc)
            send[src] += blk.size_bytes
            recv[dst] += blk.size_bytes
            transfers[blk.kind] += 1
            if topo.machine_of(src) != topo.machine_of(dst):
                inter += blk.size_bytes
    return CommVolume(int(send.sum()), send, recv, int(inter), transfers)


def project_assignment(fine: BlockGraph, coarse: BlockGraph, coarse_pl: PlacementResult) -> np.ndarray:
    """Carry a placement at a coarser block size over to a finer one.

    Every fine tile lies inside one coarse tile; fine blocks inherit that tile's device, so the
    projected placement has identical per-device weights and never more communication.
    """
    if fine.batch.sequences != coarse.batch.sequences:
        raise ValueError("graphs describe different batches")
    coarse_group = {key: gi for gi, key in enumerate(coarse.group_key)}

    def coarse_tile(si, token):
        return int(np.searchsorted(coarse.tile_bounds[si], token, side="right") - 1)

    for si, (fb, cb) in enumerate(zip(fine.tile_bounds, coarse.tile_bounds)):
        if not np.isin(cb, fb).all():
            raise ValueError(f"coarse tiles of sequence {si} are not unions of fine tiles")

    group_dev = np.empty(len(fine.groups), dtype=np.int64)
    for gi, (si, tile) in enumerate(fine.group_key):
        start = int(fine.tile_bounds[si][tile])
        group_dev[gi] = coarse_pl.group_device[coarse_group[(si, coarse_tile(si, start))]]
    comp_index = {(c.seq, c.head, c.q_tile, c.kv_tile): c.id for c in coarse.comp_blocks}
    comp_dev = np.empty(fine.num_comp, dtype=np.int64)
    for c in fine.comp_blocks:
        q0 = int(fine.tile_bounds[c.seq][c.q_tile])
        k0 = int(fine.tile_bounds[c.seq][c.kv_tile])
        cid = comp_index[(c.seq, c.head, coarse_tile(c.seq, q0), coarse_tile(c.seq, k0))]
        comp_dev[c.id] = coarse_pl.comp_device[cid]
    return np.concatenate([comp_dev, group_dev])


def carry_assignment(new: BlockGraph, old: BlockGraph, old_pl: PlacementResult) -> np.ndarray:
    """Reuse a placement of the same tiles under a different mask.

    Groups keep their device; computation blocks present in both keep theirs, new ones
    go to their Q block's device.
    """
    if [s.seq_id for s in new.batch.sequences] != [s.seq_id for s in old.batch.sequences] \
            or new.group_key != old.group_key:
        raise ValueError("graphs do not share their tiling")
    group_dev = old_pl.group_device.copy()
    data_dev = group_dev[new.group_of]
    old_comp = {(c.seq, c.head, c.q_tile, c.kv_tile): old_pl.comp_device[c.id] for c in old.comp_blocks}
    comp_dev = np.array([old_comp.get((c.seq, c.head, c.q_tile, c.kv_tile), data_dev[c.q_block])
                         for c in new.comp_blocks], dtype=np.int64)
    return np.concatenate([comp_dev, group_dev])
