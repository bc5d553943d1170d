"""Deterministic lockstep execution of per-device plans, numerically or for cost only."""

from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .blocks import KV, O, Q, BlockGraph
from .model import DeviceTopology
from .plan import ATTENTION, COPY, LAUNCH, REDUCTION, WAIT, ExecutionPlan
from .scheduler import link_times, pipeline_makespan


class Deadlock(RuntimeError):
    def __init__(self, msg: str, cycle: list[int]):
        super().__init__(msg)
        self.cycle = cycle


class TagMismatch(RuntimeError):
    pass


def exec_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, mask_rows) -> tuple[np.ndarray, ...]:
    """Attention of one tile pair; ``mask_rows[i] = (a0, b0, a1, b1)`` are kv columns row ``i`` sees.

    Returns the block-normalized output plus the row max ``m`` and row sum ``l``.
    Rows that see nothing give zeros with ``m = -inf`` and ``l = 0``.
    """
    mask_rows = np.asarray(mask_rows, dtype=np.int64).reshape(-1, 4)
    cols = np.arange(k.shape[0])
    allowed = ((cols >= mask_rows[:, 0:1]) & (cols < mask_rows[:, 1:2])) \
        | ((cols >= mask_rows[:, 2:3]) & (cols < mask_rows[:, 3:4]))
    s = np.where(allowed, q @ k.T / np.sqrt(q.shape[1]), -np.inf)
    m = s.max(axis=1, initial=-np.inf)
    safe = np.where(np.isfinite(m), m, 0.0)
    e = np.where(allowed, np.exp(s - safe[:, None]), 0.0)
    l = e.sum(axis=1)
    out = e @ v
    nz = l > 0
    out[nz] /= l[nz, None]
    return out, m, l


def exec_reduction(partials) -> tuple[np.ndarray, ...]:
    """Merge ``(out, m, l)`` partials of the same rows into one normalized result."""
    outs, ms, ls = zip(*partials)
    if len(outs) == 1:
        return outs[0].copy(), ms[0].copy(), ls[0].copy()
    m_all = np.max(np.stack(ms), axis=0)
    safe = np.where(np.isfinite(m_all), m_all, 0.0)
    out = np.zeros_like(outs[0])
    l_tot = np.zeros_like(ls[0])
    for o, m, l in zip(outs, ms, ls):
        w = np.where(l > 0, l * np.exp(np.where(np.isfinite(m), m, 0.0) - safe), 0.0)
        l_tot += w
        out += o * w[:, None]
    nz = l_tot > 0
    out[nz] /= l_tot[nz, None]
    return out, m_all, l_tot


@dataclass
class SimDevice:
    device: int
    buffers: dict = field(default_factory=lambda: {Q: {}, KV: {}, O: {}, "OUT": {}})
    pc: int = 0
    flops: int = 0
    flops_by_division: dict = field(default_factory=lambda: defaultdict(int))
    pending: dict = field(default_factory=dict)  # tag -> recv launch

    def done(self, plan: ExecutionPlan) -> bool:
        return self.pc >= len(plan.instructions)


@dataclass
class SimReport:
    iteration: int
    divisions: int
    link_bytes: dict  # "src>dst" -> bytes per served division, index T is the output phase
    total_bytes: int
    inter_machine_bytes: int
    flops_per_device: list
    comp_time: list
    comm_time: list
    output_comm_time: float
    makespan: float
    max_abs_error: float | None = None
    messages: int = 0

    def to_json(self) -> dict:
        return {
            "iteration": self.iteration, "divisions": self.divisions, "link_bytes": self.link_bytes,
            "total_bytes": self.total_bytes, "inter_machine_bytes": self.inter_machine_bytes,
            "flops_per_device": self.flops_per_device, "comp_time": self.comp_time,
            "comm_time": self.comm_time, "output_comm_time": self.output_comm_time,
            "makespan": self.makespan, "max_abs_error": self.max_abs_error, "messages": self.messages,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    def to_csv(self) -> str:
        """One row per served division: bytes moved and modeled times."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "division", "bytes", "comp_time", "comm_time"])
        for t in range(self.divisions + 1):
            nbytes = sum(v[t] for v in self.link_bytes.values())
            comp = self.comp_time[t] if t < self.divisions else 0.0
            comm = self.comm_time[t] if t < self.divisions else self.output_comm_time
            w.writerow([self.iteration, t, nbytes, repr(comp), repr(comm)])
        return buf.getvalue()


def _slice(payload, g: BlockGraph, block: int):
    b = g.data_blocks[block]
    q, k, v = payload[g.batch.sequences[b.seq].seq_id]
    if b.kind == Q:
        return q[b.head, b.start:b.end].copy()
    return (k[b.head, b.start:b.end].copy(), v[b.head, b.start:b.end].copy())


def _snapshot(x):
    if isinstance(x, tuple):
        return tuple(a.copy() for a in x)
    return None if x is None else x.copy()


def run(plans: list[ExecutionPlan], g: BlockGraph, topo: DeviceTopology, payload=None,
        oracle: dict | None = None) -> tuple[SimReport, dict | None]:
    """Execute ``plans`` in round-robin lockstep.

    With ``payload`` (seq_id -> (Q, K, V) arrays) the buffers hold real values and the final
    outputs per sequence are returned; without it only bytes, flops and time are tracked.
    Sends are eager: a launch posts a snapshot of its buffers; a recv wait blocks until posted.
    """
    numeric = payload is not None
    T = plans[0].divisions if plans else 0
    iteration = plans[0].iteration if plans else 0
    recv_tags = {i["tag"] for p in plans for i in p.instructions if i["op"] == LAUNCH and i["direction"] == "recv"}
    send_tags = {i["tag"] for p in plans for i in p.instructions if i["op"] == LAUNCH and i["direction"] == "send"}
    if recv_tags != send_tags:
        raise TagMismatch(f"unmatched tags: {sorted(recv_tags ^ send_tags)}")

    devs = [SimDevice(p.device) for p in plans]
    for p, dv in zip(plans, devs):
        for pre in p.preload:
            dv.buffers[pre["kind"]][pre["index"]] = _slice(payload, g, pre["block"]) if numeric else None

    net: dict[str, list] = {}
    link_bytes = defaultdict(lambda: [0] * (T + 1))
    inter = 0
    nmsg = 0

    def step(p: ExecutionPlan, dv: SimDevice) -> bool:
        nonlocal inter, nmsg
        ins = p.instructions[dv.pc]
        op = ins["op"]
        if op == LAUNCH:
            if ins["direction"] == "send":
                buf = dv.buffers[ins["kind"]]
                net[ins["tag"]] = [_snapshot(buf[i]) for i in ins["indices"]]
                key = f"{p.device}>{ins['peer']}"
                link_bytes[key][ins["serves"]] += ins["bytes"]
                nmsg += 1
                if topo.machine_of(p.device) != topo.machine_of(ins["peer"]):
                    inter += ins["bytes"]
            else:
                dv.pending[ins["tag"]] = ins
        elif op == WAIT:
            tag = ins["tag"]
            if ins["direction"] == "recv":
                if tag not in net:
                    return False
                li = dv.pending.pop(tag)
                for i, val in zip(li["indices"], net.pop(tag)):
                    dv.buffers[li["kind"]][i] = val
        elif op == ATTENTION:
            for it in ins["items"]:
                mask = np.asarray(it["mask"], dtype=np.int64)
                pairs = int(np.sum(np.maximum(mask[:, 1] - mask[:, 0], 0) + np.maximum(mask[:, 3] - mask[:, 2], 0)))
                f = 4 * pairs * g.batch.head_dim
                dv.flops += f
                dv.flops_by_division[ins["division"]] += f
                if numeric:
                    k, v = dv.buffers[KV][it["kv"]]
                    dv.buffers[O][it["out"]] = exec_attention(dv.buffers[Q][it["q"]], k, v, mask)
                else:
                    dv.buffers[O][it["out"]] = None
        elif op == REDUCTION:
            for it in ins["items"]:
                if numeric:
                    dv.buffers[O][it["dst"]] = exec_reduction([dv.buffers[O][i] for i in it["srcs"]])
        elif op == COPY:
            for it in ins["items"]:
                src = dv.buffers[O][it["src"]]
                dv.buffers["OUT"][it["dst"]] = src[0].copy() if numeric else None
        dv.pc += 1
        return True

    while not all(dv.done(p) for p, dv in zip(plans, devs)):
        progressed = False
        for p, dv in zip(plans, devs):
            while not dv.done(p) and step(p, dv):
                progressed = True
        if not progressed:
            raise _deadlock(plans, devs)
    if net:
        raise TagMismatch(f"messages never received: {sorted(net)}")

    comp_time = [max((dv.flops_by_division.get(t, 0) for dv in devs), default=0) / topo.flops_per_sec
                 for t in range(T)]
    comm_time = _per_message(plans, topo, T)
    out_time = comm_time.pop()
    report = SimReport(
        iteration, T, {k: list(v) for k, v in sorted(link_bytes.items())},
        int(sum(sum(v) for v in link_bytes.values())), int(inter), [dv.flops for dv in devs],
        comp_time, comm_time, out_time, pipeline_makespan(comp_time, comm_time, out_time), messages=nmsg)

    outputs = None
    if numeric:
        outputs = _assemble(plans, devs, g)
        if oracle is not None:
            report.max_abs_error = max(float(np.max(np.abs(outputs[s] - oracle[s]))) for s in oracle)
    return report, outputs


def _per_message(plans, topo, T) -> list[float]:
    msgs = [[] for _ in range(T + 1)]
    for p in plans:
        for i in p.instructions:
            if i["op"] == LAUNCH and i["direction"] == "send":
                msgs[i["serves"]].append((p.device, i["peer"], i["bytes"]))
    return [link_times(topo, m) for m in msgs]


def _assemble(plans, devs, g: BlockGraph) -> dict[str, np.ndarray]:
    batch = g.batch
    out = {s.seq_id: np.full((batch.heads, s.length, batch.head_dim), np.nan) for s in batch.sequences}
    for p, dv in zip(plans, devs):
        for o in p.outputs:
            b = g.data_blocks[o["block"]]
            out[batch.sequences[b.seq].seq_id][b.head, b.start:b.end] = dv.buffers["OUT"][o["index"]]
    for sid, arr in out.items():
        if np.isnan(arr).any():
            raise RuntimeError(f"sequence {sid}: output rows never produced")
    return out


def _deadlock(plans, devs) -> Deadlock:
    waiting = {}
    for p, dv in zip(plans, devs):
        if not dv.done(p):
            ins = p.instructions[dv.pc]
            waiting[p.device] = dv.pending[ins["tag"]]["peer"] if ins["tag"] in dv.pending else None
    start = min(waiting)
    cycle, seen = [], set()
    cur = start
    while cur is not None and cur not in seen and cur in waiting:
        seen.add(cur)
        cycle.append(cur)
        cur = waiting[cur]
    if cur in cycle:
        cycle = cycle[cycle.index(cur):] + [cur]
    return Deadlock(f"no device can progress; wait chain {' -> '.join(map(str, cycle))}", cycle)
