"""Data and computation blocks of a batch."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .model import AttendRanges, Batch, gen_mask

Q, KV, O = "Q", "KV", "O"
DATA_KINDS = (Q, KV, O)


@dataclass(frozen=True)
class DataBlock:
    id: int
    kind: str
    seq: int  # index into batch.sequences
    head: int  # Q/O: query head; KV: kv group
    tile: int
    start: int
    end: int
    size_bytes: int

    @property
    def tokens(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class ComputationBlock:
    id: int
    seq: int
    head: int
    q_tile: int
    kv_tile: int
    q_block: int
    kv_block: int
    o_block: int
    attended_pairs: int
    flops: int


@dataclass(frozen=True, eq=False)
class BlockGraph:
    batch: Batch
    block_sizes: tuple[int, ...]
    data_blocks: tuple[DataBlock, ...]
    comp_blocks: tuple[ComputationBlock, ...]
    groups: tuple[tuple[int, ...], ...]  # co-location groups of data block ids, one per (seq, tile)
    group_of: np.ndarray  # data block id -> group id
    group_key: tuple[tuple[int, int], ...]  # group id -> (seq, tile)
    tile_bounds: tuple[np.ndarray, ...]  # per sequence, token boundaries of its tiles
    ranges: tuple[AttendRanges, ...]

    @property
    def num_data(self) -> int:
        return len(self.data_blocks)

    @property
    def num_comp(self) -> int:
        return len(self.comp_blocks)

    def comps_of_output(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for c in self.comp_blocks:
            out.setdefault(c.o_block, []).append(c.id)
        return out

    def tile_mask(self, c: ComputationBlock) -> np.ndarray:
        """Row ranges of comp block ``c`` relative to its KV tile, shape (q rows, 4)."""
        q = self.data_blocks[c.q_block]
        kv = self.data_blocks[c.kv_block]
        return self.ranges[c.seq].tile_rows(q.start, q.end, kv.start, kv.end)

    def to_json(self) -> dict:
        seqs = self.batch.sequences
        return {
            "block_sizes": list(self.block_sizes),
            "data_blocks": [
                {"id": b.id, "kind": b.kind, "seq_id": seqs[b.seq].seq_id, "head": b.head,
                 "tile": b.tile, "token_range": [b.start, b.end], "size_bytes": b.size_bytes}
                for b in self.data_blocks],
            "comp_blocks": [
                {"id": c.id, "seq_id": seqs[c.seq].seq_id, "head": c.head, "q_block": c.q_block,
                 "kv_block": c.kv_block, "o_block": c.o_block, "attended_pairs": c.attended_pairs,
                 "flops": c.flops}
                for c in self.comp_blocks],
            "groups": [list(g) for g in self.groups],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def _tile_bounds(length: int, block: int) -> np.ndarray:
    b = np.arange(0, length, block, dtype=np.int64)
    return np.append(b, length)


def generate_blocks(batch: Batch, block_size: int | Mapping[str, int],
                    ranges: Mapping[str, AttendRanges] | None = None) -> BlockGraph:
    """Split every sequence into tiles of ``block_size`` tokens and enumerate non-empty tiles.

    ``block_size`` may be a per-sequence mapping keyed by ``seq_id``.
    """
    H, G, D, bpe = batch.heads, batch.kv_groups, batch.head_dim, batch.bytes_per_element
    data: list[DataBlock] = []
    comps: list[ComputationBlock] = []
    groups: list[tuple[int, ...]] = []
    group_key: list[tuple[int, int]] = []
    sizes, all_bounds, all_ranges = [], [], []

    for si, seq in enumerate(batch.sequences):
        bs = block_size[seq.seq_id] if isinstance(block_size, Mapping) else block_size
        if bs < 1:
            raise ValueError("block size must be >= 1")
        sizes.append(bs)
        r = ranges[seq.seq_id] if ranges is not None else gen_mask(seq)
        all_ranges.append(r)
        bounds = _tile_bounds(seq.length, bs)
        all_bounds.append(bounds)
        ntiles = len(bounds) - 1

        ids: dict[tuple[str, int, int], int] = {}
        for kind, nheads, mult in ((Q, H, 1), (KV, G, 2), (O, H, 1)):
            for h in range(nheads):
                for t in range(ntiles):
                    start, end = int(bounds[t]), int(bounds[t + 1])
                    bid = len(data)
                    ids[(kind, h, t)] = bid
                    data.append(DataBlock(bid, kind, si, h, t, start, end, (end - start) * D * bpe * mult))

        for t in range(ntiles):
            members = [ids[(Q, h, t)] for h in range(H)] + [ids[(KV, g, t)] for g in range(G)] \
                + [ids[(O, h, t)] for h in range(H)]
            groups.append(tuple(members))
            group_key.append((si, t))

        pairs = r.tile_pairs(bounds, bounds)
        nz = np.argwhere(pairs > 0)  # row-major: q tile, then kv tile
        for h in range(H):
            g = batch.kv_group_of(h)
            for qt, kt in nz:
                n = int(pairs[qt, kt])
                comps.append(ComputationBlock(len(comps), si, h, int(qt), int(kt), ids[(Q, h, qt)],
                                              ids[(KV, g, kt)], ids[(O, h, qt)], n, 4 * n * D))

    group_of = np.empty(len(data), dtype=np.int64)
    for gi, members in enumerate(groups):
        group_of[list(members)] = gi
    return BlockGraph(batch, tuple(sizes), tuple(data), tuple(comps), tuple(groups), group_of,
                      tuple(group_key), tuple(all_bounds), tuple(all_ranges))


def colocation_groups(g: BlockGraph) -> list[tuple[int, ...]]:
    return list(g.groups)
