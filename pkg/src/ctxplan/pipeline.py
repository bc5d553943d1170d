"""Batching and the look-ahead plan/simulate pipeline."""

from __future__ import annotations

import csv
import io
import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Iterator

from .blocks import generate_blocks
from .model import Batch, DeviceTopology, SequenceSpec
from .placement import EPS_DATA, EPS_INTER, EPS_INTRA, communication_volume, place
from .plan import compile_plans, verify_plans
from .reference import dense_batch_attention, make_payload
from .scheduler import DEFAULT_DIVISIONS, schedule
from .simexec import run

BLOCK_SIZES = (512, 1024, 2048, 4096)
MODES = ("plan", "simulate", "compare", "sweep")


class OversizedSequence(ValueError):
    pass


@dataclass
class PipelineConfig:
    block_size: int = 1024
    divisions: int = DEFAULT_DIVISIONS
    eps_inter: float = EPS_INTER
    eps_intra: float = EPS_INTRA
    eps_data: float = EPS_DATA
    lookahead: int = 2
    seed: int = 0
    machines: int = 1
    devices_per_machine: int = 4
    token_budget: int = 131072
    mode: str = "simulate"
    heads: int = 8
    kv_groups: int = 2
    head_dim: int = 128
    bytes_per_element: int = 2
    numeric: bool = False

    def __post_init__(self):
        if self.lookahead < 0:
            raise ValueError("lookahead must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    @property
    def topology(self) -> DeviceTopology:
        return DeviceTopology(self.machines, self.devices_per_machine)

    def batch(self, seqs) -> Batch:
        return Batch(tuple(seqs), self.heads, self.kv_groups, self.head_dim, self.token_budget,
                     self.bytes_per_element)


def make_batches(stream: Iterable[SequenceSpec], token_budget: int) -> Iterator[list[SequenceSpec]]:
    """Fill batches in stream order; a sequence that would overflow starts the next one."""
    cur: list[SequenceSpec] = []
    used = 0
    for s in stream:
        if s.length > token_budget:
            raise OversizedSequence(f"{s.seq_id}: {s.length} tokens exceed the budget {token_budget}")
        if cur and used + s.length > token_budget:
            yield cur
            cur, used = [], 0
        cur.append(s)
        used += s.length
    if cur:
        yield cur


class PlanStore:
    """Plans keyed by iteration; concurrent writers, one reader."""

    def __init__(self):
        self._lock = threading.Lock()
        self._plans: dict[int, object] = {}

    def put(self, iteration: int, value) -> None:
        with self._lock:
            self._plans[iteration] = value

    def pop(self, iteration: int):
        with self._lock:
            return self._plans.pop(iteration)

    def __contains__(self, iteration: int) -> bool:
        with self._lock:
            return iteration in self._plans


class EventLog:
    def __init__(self):
        self._lock = threading.Lock()
        self.events: list[tuple[str, int]] = []

    def add(self, event: str, iteration: int) -> None:
        with self._lock:
            self.events.append((event, iteration))

    def check(self, lookahead: int) -> list[str]:
        """Contract violations: simulation before its plan, or too many plans in flight."""
        problems = []
        planned, inflight, peak = set(), 0, 0
        for ev, i in self.events:
            if ev == "plan_start":
                inflight += 1
                peak = max(peak, inflight)
            elif ev in ("plan_done", "plan_failed"):
                inflight -= 1
                planned.add(i)
            elif ev == "simulate_start" and i not in planned:
                problems.append(f"iteration {i} simulated before its plan finished")
        if peak > lookahead + 1:
            problems.append(f"{peak} plans in flight, limit {lookahead + 1}")
        return problems


@dataclass
class PipelineResult:
    reports: list[dict]
    events: EventLog = field(repr=False)

    def dumps(self) -> str:
        return json.dumps(self.reports, sort_keys=True, indent=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "sequences", "tokens", "comm_bytes", "sim_bytes", "makespan", "error"])
        for r in self.reports:
            w.writerow([r["iteration"], r.get("sequences", ""), r.get("tokens", ""), r.get("comm_bytes", ""),
                        r.get("sim", {}).get("total_bytes", ""), repr(r.get("sim", {}).get("makespan", "")),
                        r.get("error", "")])
        return buf.getvalue()


def plan_batch(cfg: PipelineConfig, seqs, iteration: int):
    batch = cfg.batch(seqs)
    g = generate_blocks(batch, cfg.block_size)
    pl = place(g, cfg.topology, cfg.eps_inter, cfg.eps_intra, cfg.eps_data, seed=cfg.seed + iteration)
    s = schedule(g, pl, cfg.divisions)
    plans = compile_plans(s, iteration=iteration)
    verify_plans(plans, g, pl)
    return g, pl, s, plans


def pipeline_run(cfg: PipelineConfig, batches: list[list[SequenceSpec]]) -> PipelineResult:
    """Plan iterations ahead of simulation on a thread pool.

    Before iteration ``i`` simulates, plans ``i..i+lookahead`` are finished; at most
    ``lookahead + 1`` plans are being built at any time.
    """
    log = EventLog()
    store = PlanStore()
    n = len(batches)
    k = cfg.lookahead

    def task(i):
        log.add("plan_start", i)
        try:
            store.put(i, plan_batch(cfg, batches[i], i))
        except Exception as e:  # isolated per iteration
            store.put(i, e)
            log.add("plan_failed", i)
            return
        log.add("plan_done", i)

    reports = []
    with ThreadPoolExecutor(max_workers=k + 1) as pool:
        futures = {}

        def submit(i):
            if i < n and i not in futures:
                futures[i] = pool.submit(task, i)

        for i in range(min(k + 1, n)):
            submit(i)
        for i in range(n):
            for j in range(i, min(i + k + 1, n)):
                submit(j)
                futures[j].result()
            if k > 0:
                submit(i + k + 1)
            log.add("simulate_start", i)
            reports.append(_simulate(cfg, i, batches[i], store.pop(i)))
            log.add("simulate_done", i)
            del futures[i]
    return PipelineResult(reports, log)


def _simulate(cfg: PipelineConfig, i: int, seqs, planned) -> dict:
    rep = {"iteration": i, "sequences": len(seqs), "tokens": sum(s.length for s in seqs)}
    if isinstance(planned, Exception):
        return rep | {"error": f"{type(planned).__name__}: {planned}"}
    g, pl, s, plans = planned
    rep["comm_bytes"] = communication_volume(g, pl).total
    rep["balance"] = pl.balance()
    if cfg.mode == "plan":
        return rep
    try:
        payload = oracle = None
        if cfg.numeric:
            payload = make_payload(g.batch, cfg.seed + i)
            oracle = dense_batch_attention(g.batch, payload)
        sim, _ = run(plans, g, cfg.topology, payload, oracle)
    except Exception as e:
        return rep | {"error": f"{type(e).__name__}: {e}"}
    return rep | {"sim": sim.to_json()}


def config_json(cfg: PipelineConfig) -> dict:
    return asdict(cfg)
