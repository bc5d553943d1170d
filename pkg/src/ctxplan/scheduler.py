"""Division scheduling: split each device's computation blocks into T communication-balanced divisions."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .blocks import BlockGraph
from .model import DeviceTopology
from .placement import PlacementResult

DEFAULT_DIVISIONS = 4
MSG_KINDS = ("Q", "KV", "O")


@dataclass(eq=False)
class DivisionSchedule:
    graph: BlockGraph
    placement: PlacementResult
    T: int
    comp: list  # [t][device] -> comp block ids
    fetch: list  # [t][device] -> [(data block, src device)]
    output: list  # [device] -> [(o block, owner device)] partials sent after the last division
    comm_requirement: np.ndarray  # [dst, src] bytes of inputs dst needs from src

    @property
    def num_devices(self) -> int:
        return self.placement.num_devices

    def limit_exceeded(self, t: int, dst: int, src: int, nbytes: int) -> bool:
        """True if ``nbytes`` fetched from ``src`` in one division breaks the 1/T share."""
        return nbytes * self.T > self.comm_requirement[dst, src]

    def sends(self, t: int, src: int) -> list[tuple[int, int]]:
        out = []
        for dst in range(self.num_devices):
            out += [(b, dst) for b, s in self.fetch[t][dst] if s == src]
        return out

    def fetched_bytes(self, t: int, dst: int) -> dict[int, int]:
        per = defaultdict(int)
        for b, src in self.fetch[t][dst]:
            per[src] += self.graph.data_blocks[b].size_bytes
        return dict(per)

    def to_json(self) -> dict:
        R = self.num_devices
        return {
            "T": self.T,
            "divisions": [
                [{"device": d, "comp": list(self.comp[t][d]),
                  "fetch": [[b, s] for b, s in self.fetch[t][d]],
                  "send": [[b, dst] for b, dst in self.sends(t, d)]} for d in range(R)]
                for t in range(self.T)],
            "output": [[[o, owner] for o, owner in self.output[d]] for d in range(R)],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def _remote_inputs(g: BlockGraph, pl: PlacementResult):
    data_dev = pl.data_device
    need = []
    for c in g.comp_blocks:
        d = pl.comp_device[c.id]
        need.append([(b, int(data_dev[b])) for b in (c.q_block, c.kv_block) if data_dev[b] != d])
    return need


def schedule(g: BlockGraph, pl: PlacementResult, T: int = DEFAULT_DIVISIONS) -> DivisionSchedule:
    if T < 2:
        raise ValueError("need at least two divisions")
    R = pl.num_devices
    sizes = [b.size_bytes for b in g.data_blocks]
    need = _remote_inputs(g, pl)

    per_device: list[list[int]] = [[] for _ in range(R)]
    for c in g.comp_blocks:
        per_device[int(pl.comp_device[c.id])].append(c.id)

    requirement = np.zeros((R, R), dtype=np.int64)
    for d in range(R):
        seen = set()
        for c in per_device[d]:
            for b, src in need[c]:
                if b not in seen:
                    seen.add(b)
                    requirement[d, src] += sizes[b]

    comp = [[[] for _ in range(R)] for _ in range(T)]
    fetch = [[[] for _ in range(R)] for _ in range(T)]
    resident = [set() for _ in range(R)]
    load = [0] * R
    done = [set() for _ in range(R)]

    def take(t, d, c, new):
        comp[t][d].append(c)
        done[d].add(c)
        load[d] += g.comp_blocks[c].flops
        for b, src in new:
            resident[d].add(b)
            fetch[t][d].append((b, src))

    for d in range(R):
        for c in per_device[d]:
            if not need[c]:
                take(0, d, c, [])

    for t in range(1, T - 1):
        active = {d for d in range(R) if len(done[d]) < len(per_device[d])}
        while active:
            d = min(active, key=lambda x: (load[x], x))
            used = defaultdict(int)
            for c in per_device[d]:
                if c in done[d]:
                    continue
                new = [(b, s) for b, s in need[c] if b not in resident[d]]
                add = defaultdict(int)
                for b, s in new:
                    add[s] += sizes[b]
                if any((used[s] + n) * T > requirement[d, s] for s, n in add.items()):
                    continue
                for s, n in add.items():
                    used[s] += n
                take(t, d, c, new)
            active.discard(d)

    for d in range(R):
        for c in per_device[d]:
            if c not in done[d]:
                take(T - 1, d, c, [(b, s) for b, s in need[c] if b not in resident[d]])

    data_dev = pl.data_device
    output = []
    for d in range(R):
        outs = sorted({g.comp_blocks[c].o_block for c in per_device[d]})
        output.append([(o, int(data_dev[o])) for o in outs if data_dev[o] != d])
    return DivisionSchedule(g, pl, T, comp, fetch, output, requirement)


# --- cost model ------------------------------------------------------------------------------

def pipeline_makespan(comp: list[float], comm: list[float], out_comm: float = 0.0) -> float:
    """Division ``t``'s transfer starts with division ``t-1``'s compute; compute waits for its data."""
    finish = 0.0
    start_prev = 0.0
    for t, c in enumerate(comp):
        ready = start_prev + (comm[t] if t > 0 else 0.0)
        start = max(finish, ready)
        start_prev = start
        finish = start + c
    return finish + out_comm


def link_times(topo: DeviceTopology, messages) -> float:
    """Longest per-link busy time for ``messages``: iterable of (src, dst, bytes)."""
    busy = defaultdict(float)
    for src, dst, nbytes in messages:
        lat, bw = topo.link(src, dst)
        busy[(src, dst)] += lat + nbytes / bw
    return max(busy.values(), default=0.0)


def schedule_messages(s: DivisionSchedule):
    """Per served division (T = output phase): {(src, dst, kind): bytes}, one message per key."""
    g = s.graph
    out = [defaultdict(int) for _ in range(s.T + 1)]
    for t in range(s.T):
        for d in range(s.num_devices):
            for b, src in s.fetch[t][d]:
                blk = g.data_blocks[b]
                out[t][(src, d, blk.kind)] += blk.size_bytes
    for d in range(s.num_devices):
        for o, owner in s.output[d]:
            out[s.T][(d, owner, "O")] += g.data_blocks[o].size_bytes
    return out


def schedule_cost(s: DivisionSchedule, topo: DeviceTopology | None = None) -> dict:
    topo = topo or s.placement.topology
    g = s.graph
    comp_time = []
    for t in range(s.T):
        per_dev = [sum(g.comp_blocks[c].flops for c in s.comp[t][d]) for d in range(s.num_devices)]
        comp_time.append(max(per_dev, default=0) / topo.flops_per_sec)
    msgs = schedule_messages(s)
    comm_time = [link_times(topo, [(a, b, n) for (a, b, _), n in msgs[t].items()]) for t in range(s.T)]
    out_time = link_times(topo, [(a, b, n) for (a, b, _), n in msgs[s.T].items()])
    return {"comp_time": comp_time, "comm_time": comm_time, "output_comm_time": out_time,
            "makespan": pipeline_makespan(comp_time, comm_time, out_time)}
