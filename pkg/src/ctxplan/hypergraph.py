"""Block hypergraph, the connectivity-minus-one objective, and balanced k-way partitioners.

Vertices ``[0, num_comp)`` are computation blocks with weight ``[flops, 0]``; the rest are
co-location groups with weight ``[0, bytes]``. Each data block contributes one hyperedge
joining its group vertex with every computation block that reads or writes it.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .blocks import BlockGraph


class Infeasible(ValueError):
    """No partition can satisfy the balance caps (or the heuristic failed to find one)."""


class TooLarge(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Hypergraph:
    weights: np.ndarray  # (n, 2) int64 [flops, bytes]
    edge_weights: np.ndarray  # (m,) int64
    edges: tuple[tuple[int, ...], ...]
    num_comp: int = 0
    edge_block: np.ndarray | None = None  # data block id behind each edge

    @property
    def num_vertices(self) -> int:
        return len(self.weights)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @classmethod
    def from_edges(cls, weights, edges: Sequence[tuple[int, Sequence[int]]], num_comp: int = 0):
        w = np.asarray(weights, dtype=np.int64).reshape(-1, 2)
        ew = np.array([e[0] for e in edges], dtype=np.int64)
        pins = tuple(tuple(sorted(set(int(p) for p in e[1]))) for e in edges)
        return cls(w, ew, pins, num_comp)

    def induced(self, vertices: Sequence[int]) -> tuple["Hypergraph", np.ndarray]:
        """Sub-hypergraph on ``vertices``; edges are clipped to them and dropped below two pins."""
        vertices = np.asarray(vertices, dtype=np.int64)
        local = {int(v): i for i, v in enumerate(vertices)}
        edges, ew = [], []
        for e, pins in enumerate(self.edges):
            sub = [local[p] for p in pins if p in local]
            if len(sub) >= 2:
                edges.append(tuple(sub))
                ew.append(self.edge_weights[e])
        ncomp = int(np.sum(vertices < self.num_comp))
        return Hypergraph(self.weights[vertices], np.array(ew, dtype=np.int64), tuple(edges), ncomp), vertices


def build_hypergraph(g: BlockGraph) -> Hypergraph:
    C = g.num_comp
    weights = np.zeros((C + len(g.groups), 2), dtype=np.int64)
    users: list[list[int]] = [[] for _ in range(g.num_data)]
    for c in g.comp_blocks:
        weights[c.id, 0] = c.flops
        users[c.q_block].append(c.id)
        users[c.kv_block].append(c.id)
        users[c.o_block].append(c.id)
    for d in g.data_blocks:
        weights[C + g.group_of[d.id], 1] += d.size_bytes
    edges = tuple((C + int(g.group_of[d.id]), *users[d.id]) for d in g.data_blocks)
    ew = np.array([d.size_bytes for d in g.data_blocks], dtype=np.int64)
    return Hypergraph(weights, ew, edges, C, np.arange(g.num_data))


def connectivity(h: Hypergraph, assignment) -> np.ndarray:
    """lambda_e: number of distinct parts each hyperedge spans."""
    a = np.asarray(assignment)
    return np.array([len(set(a[list(pins)].tolist())) for pins in h.edges], dtype=np.int64)


def connectivity_cost(h: Hypergraph, p) -> int:
    assignment = p.assignment if isinstance(p, Partition) else p
    if h.num_edges == 0:
        return 0
    lam = connectivity(h, assignment)
    return int(np.sum(h.edge_weights * (lam - 1)))


def balance_caps(total: np.ndarray, R: int, eps_comp: float, eps_data: float) -> np.ndarray:
    return np.array([(1 + eps_comp) * total[0] / R, (1 + eps_data) * total[1] / R], dtype=float)


def part_weights(h: Hypergraph, assignment, R: int) -> np.ndarray:
    pw = np.zeros((R, 2), dtype=np.int64)
    np.add.at(pw, np.asarray(assignment), h.weights)
    return pw


def _fits(weight, caps) -> bool:
    return weight[0] <= caps[0] * (1 + 1e-12) and weight[1] <= caps[1] * (1 + 1e-12)


def is_balanced(h: Hypergraph, assignment, R: int, eps_comp: float, eps_data: float) -> bool:
    caps = balance_caps(h.weights.sum(axis=0), R, eps_comp, eps_data)
    return all(_fits(w, caps) for w in part_weights(h, assignment, R))


@dataclass(eq=False)
class Partition:
    assignment: np.ndarray
    num_parts: int
    eps_comp: float
    eps_data: float
    cost: int = 0
    trace: list[list[int]] = field(default_factory=list)  # cost after each FM pass, per refinement run

    def to_json(self) -> dict:
        return {str(v): int(p) for v, p in enumerate(self.assignment)}

    def dumps(self) -> str:
        return json.dumps(self.to_json())


# --------------------------------------------------------------------------------------------
# working representation shared by the heuristic's levels

class _Level:
    def __init__(self, w: np.ndarray, ew: Sequence[int], edges: Sequence[Sequence[int]]):
        self.n = len(w)
        self.w = [(int(a), int(b)) for a, b in w]
        self.ew = [int(x) for x in ew]
        self.edges = [list(e) for e in edges]
        inc: list[list[int]] = [[] for _ in range(self.n)]
        for e, pins in enumerate(self.edges):
            for v in pins:
                inc[v].append(e)
        self.inc = inc
        self.parent: list[int] | None = None  # finer vertex -> this level's vertex (set on the finer level)


class _State:
    """Pin counts, part weights and cost of one assignment on one level."""

    def __init__(self, lvl: _Level, part: list[int], R: int):
        self.lvl, self.R = lvl, R
        self.part = list(part)
        self.pc = [[0] * R for _ in lvl.edges]
        self.pw = [[0, 0] for _ in range(R)]
        for v, p in enumerate(self.part):
            self.pw[p][0] += lvl.w[v][0]
            self.pw[p][1] += lvl.w[v][1]
        cost = 0
        for e, pins in enumerate(lvl.edges):
            row = self.pc[e]
            for v in pins:
                row[self.part[v]] += 1
            cost += lvl.ew[e] * (sum(1 for x in row if x) - 1)
        self.cost = cost

    def gains(self, v: int) -> list[int]:
        a = self.part[v]
        R = self.R
        g = [0] * R
        leave = 0
        for e in self.lvl.inc[v]:
            s = self.lvl.ew[e]
            row = self.pc[e]
            if row[a] == 1:
                leave += s
            for b in range(R):
                if row[b] == 0:
                    g[b] -= s
        return [x + leave for x in g]

    def move(self, v: int, b: int) -> list[int]:
        """Move ``v`` to part ``b``; returns edges whose pin counts crossed a gain-relevant threshold."""
        a = self.part[v]
        touched = []
        delta = 0
        for e in self.lvl.inc[v]:
            row = self.pc[e]
            s = self.lvl.ew[e]
            row[a] -= 1
            row[b] += 1
            if row[a] == 0:
                delta -= s
            if row[b] == 1:
                delta += s
            if row[a] <= 1 or row[b] <= 2:
                touched.append(e)
        self.part[v] = b
        wv = self.lvl.w[v]
        self.pw[a][0] -= wv[0]
        self.pw[a][1] -= wv[1]
        self.pw[b][0] += wv[0]
        self.pw[b][1] += wv[1]
        self.cost += delta
        return touched

    def fits(self, v: int, b: int, caps) -> bool:
        wv = self.lvl.w[v]
        pw = self.pw[b]
        return (pw[0] + wv[0] <= caps[0] * (1 + 1e-12)) and (pw[1] + wv[1] <= caps[1] * (1 + 1e-12))

    def overload(self, caps) -> float:
        return sum(max(0.0, pw[d] - caps[d]) / max(caps[d], 1e-300)
                   for pw in self.pw for d in range(2))


def _fm_refine(st: _State, caps, max_passes: int, trace: list[list[int]] | None = None) -> None:
    """Fiduccia-Mattheyses passes with rollback to the best prefix; feasibility is never lost."""
    lvl = st.lvl
    n = lvl.n
    patience = max(50, n // 8)
    costs = [st.cost]
    for _ in range(max_passes):
        start_cost = st.cost
        locked = [False] * n
        version = [0] * n
        heap: list[tuple[int, int, int, int]] = []

        def push(v):
            version[v] += 1
            ver = version[v]
            a = st.part[v]
            for b, gain in enumerate(st.gains(v)):
                if b != a:
                    heapq.heappush(heap, (-gain, v, b, ver))

        boundary = set()
        for e, pins in enumerate(lvl.edges):
            if sum(1 for x in st.pc[e] if x) > 1:
                boundary.update(pins)
        if n <= 64:
            boundary = set(range(n))
        for v in sorted(boundary):
            push(v)

        moves: list[tuple[int, int]] = []
        best_cost, best_len, since = st.cost, 0, 0
        while heap:
            neg, v, b, ver = heapq.heappop(heap)
            if locked[v] or ver != version[v] or not st.fits(v, b, caps):
                continue
            a = st.part[v]
            touched = st.move(v, b)
            locked[v] = True
            moves.append((v, a))
            if st.cost < best_cost:
                best_cost, best_len, since = st.cost, len(moves), 0
            else:
                since += 1
                if since > patience:
                    break
            dirty = set()
            for e in touched:
                for u in lvl.edges[e]:
                    if not locked[u]:
                        dirty.add(u)
            for u in sorted(dirty):
                push(u)
        for v, a in reversed(moves[best_len:]):
            st.move(v, a)
        costs.append(st.cost)
        if st.cost >= start_cost:
            break
    if trace is not None:
        trace.append(costs)


def _swap_refine(st: _State, caps, trace: list[list[int]] | None = None, max_rounds: int = 10) -> None:
    """Exchange vertex pairs across parts while that lowers the cost; reaches states single moves cannot."""
    lvl = st.lvl
    w = lvl.w
    tol = [c * (1 + 1e-12) for c in caps]
    costs = [st.cost]
    for _ in range(max_rounds):
        improved = False
        for u in range(lvl.n):
            for v in range(u + 1, lvl.n):
                a, b = st.part[u], st.part[v]
                if a == b:
                    continue
                if any(st.pw[a][d] - w[u][d] + w[v][d] > tol[d] or st.pw[b][d] - w[v][d] + w[u][d] > tol[d]
                       for d in range(2)):
                    continue
                before = st.cost
                st.move(u, b)
                st.move(v, a)
                if st.cost < before:
                    improved = True
                    costs.append(st.cost)
                else:
                    st.move(v, b)
                    st.move(u, a)
        if not improved:
            break
    if trace is not None:
        trace.append(costs)


def _repair(st: _State, caps, max_rounds: int = 200) -> bool:
    """Greedy moves out of overloaded parts until every cap holds; False if stuck."""
    lvl, R = st.lvl, st.R
    for _ in range(max_rounds):
        over = [p for p in range(R) if not _fits(st.pw[p], caps)]
        if not over:
            return True
        p = max(over, key=lambda q: (max(st.pw[q][d] / caps[d] if caps[d] else 0 for d in range(2)), -q))
        dims = [d for d in range(2) if st.pw[p][d] > caps[d] * (1 + 1e-12)]
        ranked = []
        for v in range(lvl.n):
            if st.part[v] != p or all(lvl.w[v][d] == 0 for d in dims):
                continue
            g = st.gains(v)
            for b in range(R):
                if b != p and st.fits(v, b, caps):
                    ranked.append((-g[b], v, b))
        if not ranked:
            return False
        ranked.sort()
        moved = set()
        for _, v, b in ranked:
            if v in moved or not st.fits(v, b, caps):
                continue
            st.move(v, b)
            moved.add(v)
            if all(st.pw[p][d] <= caps[d] * (1 + 1e-12) for d in dims):
                break
    return all(_fits(st.pw[p], caps) for p in range(R))


def _coarsen(lvl: _Level, limit, rng, max_edge: int = 64) -> _Level | None:
    n = lvl.n
    match = [-1] * n
    coarse_id = [-1] * n
    nc = 0
    for v in rng.permutation(n).tolist():
        if coarse_id[v] >= 0:
            continue
        score: dict[int, float] = {}
        for e in lvl.inc[v]:
            pins = lvl.edges[e]
            if len(pins) > max_edge:
                continue
            r = lvl.ew[e] / (len(pins) - 1)
            for u in pins:
                if u != v and coarse_id[u] < 0:
                    score[u] = score.get(u, 0.0) + r
        wv = lvl.w[v]
        best_u, best_s = -1, 0.0
        for u in sorted(score):
            s = score[u]
            wu = lvl.w[u]
            if wv[0] + wu[0] > limit[0] or wv[1] + wu[1] > limit[1]:
                continue
            if s > best_s:
                best_u, best_s = u, s
        coarse_id[v] = nc
        if best_u >= 0:
            coarse_id[best_u] = nc
            match[v] = best_u
        nc += 1
    if nc > 0.92 * n:
        return None
    w = np.zeros((nc, 2), dtype=np.int64)
    for v in range(n):
        w[coarse_id[v]] += lvl.w[v]
    edges, ew = [], []
    for e, pins in enumerate(lvl.edges):
        cp = sorted(set(coarse_id[p] for p in pins))
        if len(cp) >= 2:
            edges.append(cp)
            ew.append(lvl.ew[e])
    coarse = _Level(w, ew, edges)
    lvl.parent = coarse_id
    return coarse


def _greedy_initial(lvl: _Level, R: int, caps, rng, randomize: bool) -> list[int]:
    rel = [max(w[0] / caps[0] if caps[0] else 0, w[1] / caps[1] if caps[1] else 0) for w in lvl.w]
    noise = rng.random(lvl.n) * (0.5 if randomize else 1e-9)
    order = sorted(range(lvl.n), key=lambda v: (-(rel[v] * (1 + noise[v])), v))
    part = [-1] * lvl.n
    pw = [[0, 0] for _ in range(R)]
    placed_in: list[dict[int, int]] = [dict() for _ in lvl.edges]  # edge -> part -> pins
    for v in order:
        wv = lvl.w[v]
        aff = [0] * R
        for e in lvl.inc[v]:
            for p in placed_in[e]:
                aff[p] += lvl.ew[e]
        best = None
        for p in range(R):
            load = max((pw[p][0] + wv[0]) / caps[0] if caps[0] else 0,
                       (pw[p][1] + wv[1]) / caps[1] if caps[1] else 0)
            fits = load <= 1 + 1e-12
            key = (fits, aff[p] if fits else 0, -load, -p)
            if best is None or key > best[0]:
                best = (key, p)
        p = best[1]
        part[v] = p
        pw[p][0] += wv[0]
        pw[p][1] += wv[1]
        for e in lvl.inc[v]:
            placed_in[e][p] = placed_in[e].get(p, 0) + 1
    return part


def _follow_data(h: Hypergraph, data_part: dict[int, int], R: int) -> list[int]:
    """Complete a data-vertex assignment: each comp vertex joins the data vertex of its first edge."""
    n = h.num_vertices
    part = [0] * n
    for v, p in data_part.items():
        part[v] = p
    first = [-1] * n
    for pins in h.edges:
        anchor = [p for p in pins if p >= h.num_comp]
        if not anchor:
            continue
        for v in pins:
            if v < h.num_comp and first[v] < 0:
                first[v] = anchor[0]
    for v in range(h.num_comp):
        part[v] = data_part.get(first[v], v % R) if first[v] >= 0 else v % R
    return part


def round_robin_start(h: Hypergraph, R: int) -> list[int]:
    data = range(h.num_comp, h.num_vertices)
    return _follow_data(h, {v: i % R for i, v in enumerate(data)}, R)


def contiguous_start(h: Hypergraph, R: int) -> list[int]:
    data = list(range(h.num_comp, h.num_vertices))
    total = float(h.weights[data, 1].sum()) if data else 0.0
    acc, out = 0.0, {}
    for v in data:
        mid = acc + h.weights[v, 1] / 2
        out[v] = min(R - 1, int(mid * R / total)) if total > 0 else 0
        acc += h.weights[v, 1]
    return _follow_data(h, out, R)


SMALL = 48  # hypergraphs up to this size also get random starts and pair swaps


def partition_heuristic(h: Hypergraph, R: int, eps_comp: float = 0.1, eps_data: float = 0.05,
                        seed: int = 0, initial: Sequence[int] | None = None,
                        n_starts: int | None = None) -> Partition:
    """Multilevel partition: heavy-edge coarsening, greedy initial parts, FM refinement per level.

    The result is the cheapest feasible candidate among the multilevel runs and the
    refined round-robin / contiguous (and optional ``initial``) starts.
    """
    n = h.num_vertices
    if R < 1:
        raise ValueError("R must be >= 1")
    if R == 1 or n == 0:
        a = np.zeros(n, dtype=np.int64)
        return Partition(a, R, eps_comp, eps_data, connectivity_cost(h, a) if n else 0)
    caps = balance_caps(h.weights.sum(axis=0), R, eps_comp, eps_data)
    heavy = [v for v in range(n) if not _fits(h.weights[v], caps)]
    if heavy:
        raise Infeasible(f"vertex {heavy[0]} with weight {h.weights[heavy[0]].tolist()} exceeds "
                         f"per-part caps {caps.tolist()}; use a smaller block size or larger epsilon")
    rng = np.random.default_rng(seed)
    fine = _Level(h.weights, h.edge_weights, h.edges)
    trace: list[list[int]] = []
    best: tuple[int, list[int]] | None = None

    def consider(part):
        nonlocal best
        if best is None or part_cost(part) < best[0]:
            best = (part_cost(part), part)

    costs_seen: dict[tuple, int] = {}

    def part_cost(part):
        key = tuple(part)
        if key not in costs_seen:
            costs_seen[key] = _State(fine, part, R).cost
        return costs_seen[key]

    starts = []
    if initial is not None:
        starts.append([int(x) for x in initial])
    starts += [round_robin_start(h, R), contiguous_start(h, R)]
    small = n <= SMALL
    if small:
        starts += [rng.integers(R, size=n).tolist() for _ in range(16)]
    for part in starts:
        st = _State(fine, part, R)
        if _repair(st, caps):
            _fm_refine(st, caps, max_passes=10, trace=trace)
            if small:
                _swap_refine(st, caps, trace)
            consider(st.part)

    if n_starts is None:
        n_starts = 8 if n <= 64 else (4 if n <= 1000 else 2)
    coarsest_size = max(40, 6 * R)
    limit = caps / 3.0
    for s in range(n_starts):
        levels = [fine]
        while levels[-1].n > coarsest_size:
            nxt = _coarsen(levels[-1], limit, rng)
            if nxt is None:
                break
            levels.append(nxt)
        top = levels[-1]
        best_top = None
        for k in range(4):
            st = _State(top, _greedy_initial(top, R, caps, rng, randomize=(k > 0 or s > 0)), R)
            if not _repair(st, caps):
                continue
            _fm_refine(st, caps, max_passes=6, trace=trace if top is fine else None)
            if best_top is None or st.cost < best_top.cost:
                best_top = st
        if best_top is None:
            continue
        if small and top is fine:
            _swap_refine(best_top, caps, trace)
        part = best_top.part
        for lvl in reversed(levels[:-1]):
            part = [part[c] for c in lvl.parent]
            st = _State(lvl, part, R)
            _fm_refine(st, caps, max_passes=10 if lvl is fine else 4,
                       trace=trace if lvl is fine else None)
            part = st.part
        consider(part)

    if best is None:
        raise Infeasible(f"no balanced {R}-way partition found (caps {caps.tolist()})")
    a = np.asarray(best[1], dtype=np.int64)
    return Partition(a, R, eps_comp, eps_data, connectivity_cost(h, a), trace)


def partition_exhaustive(h: Hypergraph, R: int, eps_comp: float = 0.1, eps_data: float = 0.05,
                         max_vertices: int = 16) -> Partition:
    """Global optimum by enumeration; parts are interchangeable so only canonical labelings are visited."""
    n = h.num_vertices
    if n > max_vertices:
        raise TooLarge(f"{n} vertices exceeds the exhaustive limit of {max_vertices}")
    caps = balance_caps(h.weights.sum(axis=0), R, eps_comp, eps_data) * (1 + 1e-12)
    w = [(int(a), int(b)) for a, b in h.weights]
    inc: list[list[int]] = [[] for _ in range(n)]
    for e, pins in enumerate(h.edges):
        for v in pins:
            inc[v].append(e)
    ew = [int(x) for x in h.edge_weights]
    pc = [[0] * R for _ in h.edges]
    span = [0] * len(h.edges)
    pw = [[0, 0] for _ in range(R)]
    suffix = [[0, 0] for _ in range(n + 1)]
    for k in range(n - 1, -1, -1):
        suffix[k] = [suffix[k + 1][0] + w[k][0], suffix[k + 1][1] + w[k][1]]
    part = [0] * n
    best_cost = [None]
    best_part = [None]

    def rec(k, used, cost):
        if best_cost[0] is not None and cost >= best_cost[0]:
            return
        if k == n:
            best_cost[0] = cost
            best_part[0] = part.copy()
            return
        free = [sum(caps[d] - pw[p][d] for p in range(R)) for d in range(2)]
        if suffix[k][0] > free[0] + 1e-6 or suffix[k][1] > free[1] + 1e-6:
            return
        for p in range(min(used + 1, R)):
            if pw[p][0] + w[k][0] > caps[0] or pw[p][1] + w[k][1] > caps[1]:
                continue
            add = 0
            for e in inc[k]:
                if pc[e][p] == 0:
                    if span[e] > 0:
                        add += ew[e]
                    span[e] += 1
                pc[e][p] += 1
            pw[p][0] += w[k][0]
            pw[p][1] += w[k][1]
            part[k] = p
            rec(k + 1, max(used, p + 1), cost + add)
            pw[p][0] -= w[k][0]
            pw[p][1] -= w[k][1]
            for e in inc[k]:
                pc[e][p] -= 1
                if pc[e][p] == 0:
                    span[e] -= 1

    rec(0, 0, 0)
    if best_part[0] is None:
        raise Infeasible(f"no balanced {R}-way partition exists (caps {caps.tolist()})")
    a = np.asarray(best_part[0], dtype=np.int64)
    return Partition(a, R, eps_comp, eps_data, int(best_cost[0]))
