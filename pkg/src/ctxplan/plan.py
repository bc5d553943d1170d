"""Compile a division schedule into per-device instruction lists over typed block buffers."""

from __future__ import annotations

import heapq
import json
from collections import defaultdict
from dataclasses import dataclass, field

from .blocks import KV, O, Q, BlockGraph
from .placement import PlacementResult
from .scheduler import DivisionSchedule

PLAN_VERSION = 1
BUFFER_KINDS = (Q, KV, O, "OUT")

ATTENTION = "BlockwiseAttention"
REDUCTION = "BlockwiseReduction"
COPY = "BlockwiseCopy"
LAUNCH = "CommLaunch"
WAIT = "CommWait"
OPS = (ATTENTION, REDUCTION, COPY, LAUNCH, WAIT)


class BufferOverflow(RuntimeError):
    pass


class PlanError(ValueError):
    pass


class BufferManager:
    """First-fit index allocator: a new block takes the lowest free index."""

    def __init__(self):
        self._free: list[int] = []
        self.capacity = 0

    def allocate(self) -> int:
        if self._free:
            return heapq.heappop(self._free)
        self.capacity += 1
        return self.capacity - 1

    def free(self, idx: int) -> None:
        heapq.heappush(self._free, idx)


def allocate_intervals(intervals) -> tuple[list[int], int]:
    """Linear-scan allocation of ``[start, end]`` live ranges (inclusive).

    An index is reusable by a value starting strictly after the previous holder's last use.
    """
    order = sorted(range(len(intervals)), key=lambda i: (intervals[i][0], i))
    mgr = BufferManager()
    active: list[tuple[int, int]] = []  # (end, index)
    out = [0] * len(intervals)
    for i in order:
        start, end = intervals[i]
        while active and active[0][0] < start:
            mgr.free(heapq.heappop(active)[1])
        out[i] = mgr.allocate()
        heapq.heappush(active, (end, out[i]))
    return out, mgr.capacity


@dataclass
class BufferLayout:
    capacity: dict[str, int]
    table: list[dict]  # one row per value: kind, index, block, live range

    def to_json(self) -> dict:
        return {"capacity": dict(self.capacity), "table": self.table}


@dataclass
class ExecutionPlan:
    device: int
    iteration: int
    divisions: int
    instructions: list[dict]
    buffers: BufferLayout
    preload: list[dict]  # {"kind", "block", "index"}: local model input
    outputs: list[dict]  # {"block", "index"}: final O blocks in the OUT buffer
    version: int = PLAN_VERSION

    def to_json(self) -> dict:
        return {"version": self.version, "device": self.device, "iteration": self.iteration,
                "divisions": self.divisions, "buffers": self.buffers.to_json(),
                "preload": self.preload, "outputs": self.outputs, "instructions": self.instructions}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, obj: dict) -> "ExecutionPlan":
        if obj.get("version") != PLAN_VERSION:
            raise PlanError(f"unsupported plan version {obj.get('version')}")
        b = obj["buffers"]
        return cls(obj["device"], obj["iteration"], obj["divisions"], obj["instructions"],
                   BufferLayout(b["capacity"], b["table"]), obj["preload"], obj["outputs"], obj["version"])

    def bytes_sent(self) -> int:
        return sum(i["bytes"] for i in self.instructions if i["op"] == LAUNCH and i["direction"] == "send")


def make_tag(iteration: int, division: int, src: int, dst: int, kind: str, seq: int = 0) -> str:
    return f"{iteration}.{division}.{src}>{dst}.{kind}.{seq}"


@dataclass
class _Val:
    kind: str
    block: int
    start: int
    end: int = -2


@dataclass
class _Builder:
    ops: list = field(default_factory=list)
    vals: list = field(default_factory=list)

    def new(self, kind, block, pos=None) -> int:
        pos = len(self.ops) if pos is None else pos
        self.vals.append(_Val(kind, block, pos, pos))
        return len(self.vals) - 1

    def use(self, v, pos=None):
        pos = len(self.ops) if pos is None else pos
        self.vals[v].end = max(self.vals[v].end, pos)


def compile_plans(s: DivisionSchedule, g: BlockGraph | None = None, pl: PlacementResult | None = None,
                  iteration: int = 0, max_buffers: dict[str, int] | None = None) -> list[ExecutionPlan]:
    g = g or s.graph
    pl = pl or s.placement
    R, T = pl.num_devices, s.T
    data_dev = pl.data_device
    blocks = g.data_blocks
    comps = g.comp_blocks

    # messages[t][(src, dst, kind)] -> sorted block ids fetched for division t
    messages = [defaultdict(list) for _ in range(T)]
    for t in range(T):
        for d in range(R):
            for b, src in s.fetch[t][d]:
                messages[t][(src, d, blocks[b].kind)].append(b)
    for t in range(T):
        for k in messages[t]:
            messages[t][k].sort()
    out_msgs = defaultdict(list)
    for d in range(R):
        for o, owner in s.output[d]:
            out_msgs[(d, owner, O)].append(o)

    plans = []
    for d in range(R):
        bld = _Builder()
        where: dict[tuple[str, int], int] = {}  # (kind, block) -> value holding it
        for b in blocks:
            if b.kind != O and data_dev[b.id] == d:
                where[(b.kind, b.id)] = bld.new(b.kind, b.id, pos=-1)
        preload_vals = list(where.values())
        acc: dict[int, int] = {}  # O block -> accumulator value
        pending_send: dict[str, list[int]] = {}

        def launches(t, msgs, serves):
            tags = []
            for (src, dst, kind), blist in sorted(msgs.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2])):
                if d not in (src, dst):
                    continue
                tag = make_tag(iteration, serves, src, dst, kind)
                nbytes = sum(blocks[b].size_bytes for b in blist)
                if src == d:
                    vals = [acc[b] if kind == O else where[(kind, b)] for b in blist]
                    for v in vals:
                        bld.use(v)
                    pending_send[tag] = vals
                    bld.ops.append(("launch", t, serves, dst, "send", kind, list(blist), vals, tag, nbytes))
                else:
                    vals = [bld.new(kind, b) for b in blist]
                    bld.ops.append(("launch", t, serves, src, "recv", kind, list(blist), vals, tag, nbytes))
                tags.append((tag, src == d, kind, blist, vals))
            return tags

        def waits(t, tags):
            for tag, is_send, kind, blist, vals in tags:
                if is_send:
                    for v in pending_send.pop(tag):
                        bld.use(v)
                bld.ops.append(("wait", t, tag, "send" if is_send else "recv"))
                if not is_send and kind != O:
                    for b, v in zip(blist, vals):
                        where[(kind, b)] = v

        def reduce_into(t, o, srcs):
            if o in acc:
                srcs = [acc[o]] + srcs
            if len(srcs) == 1:
                acc[o] = srcs[0]
                return None
            for v in srcs:
                bld.use(v)
            acc[o] = srcs[0]
            return (o, srcs[0], srcs)

        for t in range(T):
            pending = launches(t, messages[t + 1], t + 1) if t + 1 < T else []
            items = []
            partials = defaultdict(list)
            for c in sorted(s.comp[t][d]):
                cb = comps[c]
                qv, kvv = where[(Q, cb.q_block)], where[(KV, cb.kv_block)]
                bld.use(qv)
                bld.use(kvv)
                pv = bld.new(O, cb.o_block)
                partials[cb.o_block].append(pv)
                items.append((c, qv, kvv, pv))
            if items:
                bld.ops.append(("attention", t, items))
            reds = [r for o in sorted(partials) if (r := reduce_into(t, o, partials[o])) is not None]
            if reds:
                bld.ops.append(("reduction", t, reds))
            waits(t, pending)

        # epilogue: partials go to their owners, owners merge and publish
        ep = launches(T, out_msgs, T)
        received = defaultdict(list)
        for tag, is_send, kind, blist, vals in ep:
            if not is_send:
                for b, v in zip(blist, vals):
                    received[b].append(v)
        waits(T, ep)
        reds = [r for o in sorted(received) if (r := reduce_into(T, o, received[o])) is not None]
        if reds:
            bld.ops.append(("reduction", T, reds))
        copies = []
        for o in sorted(acc):
            if data_dev[o] != d:
                continue
            src = acc[o]
            bld.use(src)
            copies.append((o, src, bld.new("OUT", o)))
        if copies:
            bld.ops.append(("copy", T, copies))
        end = len(bld.ops)
        for _, _, ov in copies:
            bld.use(ov, end)
        for v in bld.vals:
            v.end = max(v.end, v.start)

        plans.append(_materialize(d, iteration, T, bld, preload_vals, copies, g, max_buffers))
    return plans


def _materialize(d, iteration, T, bld, preload_vals, copies, g, max_buffers):
    index = [0] * len(bld.vals)
    capacity = {}
    for kind in BUFFER_KINDS:
        ids = [i for i, v in enumerate(bld.vals) if v.kind == kind]
        idx, cap = allocate_intervals([(bld.vals[i].start, bld.vals[i].end) for i in ids])
        for i, k in zip(ids, idx):
            index[i] = k
        capacity[kind] = cap
        if max_buffers and kind in max_buffers and cap > max_buffers[kind]:
            raise BufferOverflow(f"device {d}: {kind} buffer needs {cap} slots, limit {max_buffers[kind]}")

    seqs = g.batch.sequences
    table = []
    for i, v in enumerate(bld.vals):
        b = g.data_blocks[v.block]
        table.append({"kind": v.kind, "index": index[i], "block": v.block, "seq_id": seqs[b.seq].seq_id,
                      "head": b.head, "start": b.start, "end": b.end, "live": [v.start, v.end]})

    instrs = []
    for op in bld.ops:
        if op[0] == "launch":
            _, t, serves, peer, direction, kind, blist, vals, tag, nbytes = op
            instrs.append({"op": LAUNCH, "division": t, "serves": serves, "peer": peer, "direction": direction,
                           "kind": kind, "blocks": blist, "indices": [index[v] for v in vals], "tag": tag,
                           "bytes": nbytes})
        elif op[0] == "wait":
            _, t, tag, direction = op
            instrs.append({"op": WAIT, "division": t, "tag": tag, "direction": direction})
        elif op[0] == "attention":
            _, t, items = op
            rows = []
            for c, qv, kvv, pv in items:
                cb = g.comp_blocks[c]
                rows.append({"comp": c, "o_block": cb.o_block, "q": index[qv], "kv": index[kvv],
                             "out": index[pv], "mask": g.tile_mask(cb).tolist()})
            instrs.append({"op": ATTENTION, "division": t, "items": rows})
        elif op[0] == "reduction":
            _, t, reds = op
            instrs.append({"op": REDUCTION, "division": t, "items": [
                {"block": o, "dst": index[dst], "srcs": [index[v] for v in srcs]} for o, dst, srcs in reds]})
        else:
            _, t, cps = op
            instrs.append({"op": COPY, "division": t, "items": [
                {"block": o, "src": index[sv], "dst": index[dv]} for o, sv, dv in cps]})

    preload = [{"kind": bld.vals[v].kind, "block": bld.vals[v].block, "index": index[v]} for v in preload_vals]
    outputs = [{"block": o, "index": index[dv]} for o, _, dv in copies]
    return ExecutionPlan(d, iteration, T, instrs, BufferLayout(capacity, table), preload, outputs)


def verify_plans(plans: list[ExecutionPlan], g: BlockGraph, pl: PlacementResult) -> None:
    """Replay every plan symbolically; raise PlanError on the first violation.

    Checks residency of every input, one launch and one wait per side of each tag,
    symmetric send/recv contents, and that a partial output carries all of its
    device's contributions before it leaves the device or is published.
    """
    R = pl.num_devices
    if len(plans) != R:
        raise PlanError(f"expected {R} plans, got {len(plans)}")
    data_dev = pl.data_device
    comps_of = g.comps_of_output()
    local_contrib = defaultdict(set)  # (device, o block) -> comps computed there
    for c in g.comp_blocks:
        local_contrib[(int(pl.comp_device[c.id]), c.o_block)].add(c.id)

    sends, recvs = {}, {}
    for p in plans:
        for ins in p.instructions:
            if ins["op"] != LAUNCH:
                continue
            side = sends if ins["direction"] == "send" else recvs
            if ins["tag"] in side:
                raise PlanError(f"tag {ins['tag']} launched twice")
            side[ins["tag"]] = (p.device, ins)
    if sends.keys() != recvs.keys():
        raise PlanError(f"unpaired tags: {sorted(set(sends) ^ set(recvs))}")
    for tag, (src, si) in sends.items():
        dst, ri = recvs[tag]
        if si["peer"] != dst or ri["peer"] != src or si["blocks"] != ri["blocks"] or si["kind"] != ri["kind"]:
            raise PlanError(f"tag {tag}: send and recv disagree")

    # contributions carried by each sent O message, filled during replay
    carried: dict[str, list[frozenset]] = {}
    published = {}

    def replay(p: ExecutionPlan, strict: bool) -> bool:
        slot: dict[tuple[str, int], tuple[int, frozenset]] = {}
        for pre in p.preload:
            if data_dev[pre["block"]] != p.device:
                raise PlanError(f"device {p.device} preloads block {pre['block']} it does not own")
            slot[(pre["kind"], pre["index"])] = (pre["block"], frozenset())
        inflight: dict[str, dict] = {}
        waited = set()

        def need(kind, idx, block):
            got = slot.get((kind, idx))
            if got is None or got[0] != block:
                raise PlanError(f"device {p.device}: {kind}[{idx}] does not hold block {block}")
            return got[1]

        for n, ins in enumerate(p.instructions):
            op = ins["op"]
            if op == LAUNCH:
                inflight[ins["tag"]] = ins
                if ins["direction"] == "send":
                    cs = [need(ins["kind"], i, b) for i, b in zip(ins["indices"], ins["blocks"])]
                    if ins["kind"] == O:
                        for b, c in zip(ins["blocks"], cs):
                            if c != local_contrib[(p.device, b)]:
                                raise PlanError(f"device {p.device}: O block {b} sent before full reduction")
                        carried[ins["tag"]] = cs
                else:
                    for i in ins["indices"]:
                        slot.pop((ins["kind"], i), None)  # undefined until the wait
            elif op == WAIT:
                tag = ins["tag"]
                if tag not in inflight or tag in waited:
                    raise PlanError(f"device {p.device}: wait on {tag} without a single matching launch")
                waited.add(tag)
                li = inflight[tag]
                if li["direction"] == "recv":
                    if li["kind"] == O and tag not in carried:
                        if strict:
                            raise PlanError(f"{tag}: partial received before its sender produced it")
                        return False
                    cs = carried.get(tag, [frozenset()] * len(li["blocks"]))
                    for i, b, c in zip(li["indices"], li["blocks"], cs):
                        slot[(li["kind"], i)] = (b, c)
            elif op == ATTENTION:
                for it in ins["items"]:
                    cb = g.comp_blocks[it["comp"]]
                    need(Q, it["q"], cb.q_block)
                    need(KV, it["kv"], cb.kv_block)
                for it in ins["items"]:
                    cb = g.comp_blocks[it["comp"]]
                    slot[(O, it["out"])] = (cb.o_block, frozenset([cb.id]))
            elif op == REDUCTION:
                for it in ins["items"]:
                    cs = [need(O, i, it["block"]) for i in it["srcs"]]
                    merged = frozenset().union(*cs)
                    if sum(len(c) for c in cs) != len(merged):
                        raise PlanError(f"device {p.device}: block {it['block']} contribution merged twice")
                    slot[(O, it["dst"])] = (it["block"], merged)
            elif op == COPY:
                for it in ins["items"]:
                    c = need(O, it["src"], it["block"])
                    if c != frozenset(comps_of.get(it["block"], ())):
                        raise PlanError(f"device {p.device}: O block {it['block']} published incomplete")
                    slot[("OUT", it["dst"])] = (it["block"], c)
            else:
                raise PlanError(f"unknown op {op}")
        if inflight.keys() != waited:
            raise PlanError(f"device {p.device}: launches never waited: {sorted(set(inflight) - waited)}")
        for out in p.outputs:
            need("OUT", out["index"], out["block"])
            published[out["block"]] = p.device
        return True

    # senders of partials replay first so their carried contributions are known
    order = sorted(plans, key=lambda p: p.device)
    todo = list(order)
    for _ in range(len(order) + 1):
        left = [p for p in todo if not replay(p, strict=False)]
        if not left:
            break
        if len(left) == len(todo):
            replay(left[0], strict=True)
        todo = left
    for o in comps_of:
        if published.get(o) != int(data_dev[o]):
            raise PlanError(f"O block {o} not published by its owner")
