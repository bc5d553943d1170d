"""Topology, sequence and mask types, plus the per-token attend-range generators."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator

import numpy as np

CAUSAL = "causal"
LAMBDA = "lambda"
CAUSAL_BLOCKWISE = "causal_blockwise"
SHARED_QUESTION = "shared_question"
MASK_KINDS = (CAUSAL, LAMBDA, CAUSAL_BLOCKWISE, SHARED_QUESTION)

_KIND_ALIASES = {
    "causal": CAUSAL,
    "lambda": LAMBDA,
    "causalblockwise": CAUSAL_BLOCKWISE,
    "causal_blockwise": CAUSAL_BLOCKWISE,
    "sharedquestion": SHARED_QUESTION,
    "shared_question": SHARED_QUESTION,
}


class MaskError(ValueError):
    pass


@dataclass(frozen=True)
class DeviceTopology:
    machines: int = 1
    devices_per_machine: int = 1
    intra_bw: float = 300e9  # bytes/s per direction over NVSwitch
    inter_bw: float = 50e9  # bytes/s, 4x100 Gbps NICs
    latency_intra: float = 2e-6
    latency_inter: float = 10e-6
    flops_per_sec: float = 150e12

    def __post_init__(self):
        if self.machines < 1 or self.devices_per_machine < 1:
            raise ValueError("topology needs at least one machine and one device per machine")
        if self.intra_bw <= 0 or self.inter_bw <= 0:
            raise ValueError("bandwidths must be positive")

    @property
    def num_devices(self) -> int:
        return self.machines * self.devices_per_machine

    def machine_of(self, device: int) -> int:
        return device // self.devices_per_machine

    def link(self, src: int, dst: int) -> tuple[float, float]:
        """(latency, bandwidth) of the src -> dst link."""
        if self.machine_of(src) == self.machine_of(dst):
            return self.latency_intra, self.intra_bw
        return self.latency_inter, self.inter_bw

    @classmethod
    def flat(cls, num_devices: int, **kw) -> "DeviceTopology":
        return cls(machines=1, devices_per_machine=num_devices, **kw)


@dataclass(frozen=True)
class MaskDescriptor:
    kind: str = CAUSAL
    params: tuple = ()  # sorted (name, value) pairs, kept hashable

    @classmethod
    def make(cls, kind: str, **params) -> "MaskDescriptor":
        key = kind.replace("-", "_").lower()
        key = _KIND_ALIASES.get(key, _KIND_ALIASES.get(key.replace("_", ""), key))
        if key not in MASK_KINDS:
            raise MaskError(f"unknown mask kind {kind!r}")
        frozen = []
        for name, value in sorted(params.items()):
            if isinstance(value, list):
                value = tuple(value)
            frozen.append((name, value))
        return cls(key, tuple(frozen))

    @classmethod
    def causal(cls) -> "MaskDescriptor":
        return cls.make(CAUSAL)

    @classmethod
    def lambda_(cls, sink_tokens: int = 64, window: int = 4096) -> "MaskDescriptor":
        return cls.make(LAMBDA, sink_tokens=sink_tokens, window=window)

    @classmethod
    def causal_blockwise(cls, block: int = 256, window_blocks: int = 2, sink_blocks: int = 1,
                         test_blocks: int = 1) -> "MaskDescriptor":
        return cls.make(CAUSAL_BLOCKWISE, block=block, window_blocks=window_blocks,
                        sink_blocks=sink_blocks, test_blocks=test_blocks)

    @classmethod
    def shared_question(cls, question_len: int, answer_lens) -> "MaskDescriptor":
        return cls.make(SHARED_QUESTION, question_len=question_len, answer_lens=list(answer_lens))

    @classmethod
    def shared_question_fractions(cls, length: int, num_answers: int = 4,
                                  answer_fraction: float = 0.2) -> "MaskDescriptor":
        """Answers of ``floor(fraction * length)`` tokens each; the question takes the rest."""
        answer = int(length * answer_fraction)
        if answer < 1 or answer * num_answers >= length:
            raise MaskError(f"cannot fit {num_answers} answers of fraction {answer_fraction} in {length} tokens")
        return cls.shared_question(length - answer * num_answers, [answer] * num_answers)

    @property
    def p(self) -> dict[str, Any]:
        return dict(self.params)

    def to_json(self) -> dict:
        out: dict[str, Any] = {"kind": self.kind}
        for k, v in self.params:
            out[k] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_json(cls, obj: dict, length: int | None = None) -> "MaskDescriptor":
        obj = dict(obj)
        kind = obj.pop("kind")
        if "answer_fraction" in obj or "num_answers" in obj:
            if length is None:
                raise MaskError("fractional shared-question mask needs the sequence length")
            return cls.shared_question_fractions(length, int(obj.get("num_answers", 4)),
                                                 float(obj.get("answer_fraction", 0.2)))
        return cls.make(kind, **obj)


@dataclass(frozen=True)
class SequenceSpec:
    seq_id: str
    length: int
    mask: MaskDescriptor = field(default_factory=MaskDescriptor.causal)

    def __post_init__(self):
        if self.length < 1:
            raise ValueError(f"sequence {self.seq_id} has non-positive length")
        validate_mask(self.mask, self.length)

    def to_json(self) -> dict:
        return {"seq_id": self.seq_id, "length": self.length, "mask": self.mask.to_json()}

    @classmethod
    def from_json(cls, obj: dict) -> "SequenceSpec":
        length = int(obj["length"])
        mask = MaskDescriptor.from_json(obj.get("mask", {"kind": CAUSAL}), length)
        return cls(str(obj["seq_id"]), length, mask)


@dataclass(frozen=True)
class Batch:
    sequences: tuple[SequenceSpec, ...]
    heads: int = 8
    kv_groups: int = 2
    head_dim: int = 128
    token_budget: int | None = None
    bytes_per_element: int = 2

    def __post_init__(self):
        object.__setattr__(self, "sequences", tuple(self.sequences))
        if self.heads < 1 or self.kv_groups < 1 or self.heads % self.kv_groups:
            raise ValueError(f"heads={self.heads} not divisible by kv_groups={self.kv_groups}")
        if self.token_budget is not None and self.total_tokens > self.token_budget:
            raise ValueError(f"batch holds {self.total_tokens} tokens, budget {self.token_budget}")
        ids = [s.seq_id for s in self.sequences]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate seq_id in batch")

    @property
    def total_tokens(self) -> int:
        return sum(s.length for s in self.sequences)

    def kv_group_of(self, head: int) -> int:
        return head * self.kv_groups // self.heads

    def header(self) -> dict:
        return {"heads": self.heads, "kv_groups": self.kv_groups, "head_dim": self.head_dim,
                "token_budget": self.token_budget, "bytes_per_element": self.bytes_per_element}


@dataclass(frozen=True, eq=False)
class AttendRanges:
    """Per-token key ranges: row ``i`` attends ``[starts[i,0], ends[i,0]) U [starts[i,1], ends[i,1])``.

    An empty second range is stored as ``(0, 0)``.
    """

    starts: np.ndarray
    ends: np.ndarray

    def __len__(self) -> int:
        return len(self.starts)

    def row(self, i: int) -> list[tuple[int, int]]:
        return [(int(a), int(b)) for a, b in zip(self.starts[i], self.ends[i]) if b > a]

    def pair_count(self) -> int:
        return int(np.clip(self.ends - self.starts, 0, None).sum())

    def to_dense(self) -> np.ndarray:
        L = len(self)
        cols = np.arange(L)
        dense = np.zeros((L, L), dtype=bool)
        for r in range(2):
            a = self.starts[:, r:r + 1]
            b = self.ends[:, r:r + 1]
            dense |= (cols >= a) & (cols < b)
        return dense

    def tile_pairs(self, q_bounds: np.ndarray, kv_bounds: np.ndarray) -> np.ndarray:
        """Attended-pair counts for every (q tile, kv tile) given tile boundary arrays."""
        lo = kv_bounds[:-1][None, :]
        hi = kv_bounds[1:][None, :]
        per_row = np.zeros((len(self), len(kv_bounds) - 1), dtype=np.int64)
        for r in range(2):
            a = self.starts[:, r:r + 1]
            b = self.ends[:, r:r + 1]
            per_row += np.clip(np.minimum(b, hi) - np.maximum(a, lo), 0, None)
        return np.add.reduceat(per_row, q_bounds[:-1], axis=0)

    def tile_rows(self, q0: int, q1: int, k0: int, k1: int) -> np.ndarray:
        """Ranges of rows ``q0..q1`` clipped to keys ``[k0, k1)``, relative to ``k0``; shape (rows, 4)."""
        s = np.clip(self.starts[q0:q1], k0, k1) - k0
        e = np.clip(self.ends[q0:q1], k0, k1) - k0
        e = np.maximum(e, s)
        return np.stack([s[:, 0], e[:, 0], s[:, 1], e[:, 1]], axis=1)


def validate_mask(mask: MaskDescriptor, length: int) -> None:
    p = mask.p
    if mask.kind == CAUSAL:
        return
    if mask.kind == LAMBDA:
        if p.get("sink_tokens", 0) < 0 or p.get("window", 1) < 1:
            raise MaskError("lambda mask needs sink_tokens >= 0 and window >= 1")
    elif mask.kind == CAUSAL_BLOCKWISE:
        if p.get("block", 1) < 1 or p.get("window_blocks", 1) < 1:
            raise MaskError("causal blockwise mask needs block >= 1 and window_blocks >= 1")
        if p.get("sink_blocks", 0) < 0 or p.get("test_blocks", 0) < 0:
            raise MaskError("sink_blocks and test_blocks must be non-negative")
    elif mask.kind == SHARED_QUESTION:
        q = p.get("question_len", 0)
        answers = p.get("answer_lens", ())
        if q < 0 or any(a < 1 for a in answers):
            raise MaskError("shared question lengths must be positive")
        if q + sum(answers) != length:
            raise MaskError(f"question ({q}) + answers ({sum(answers)}) != sequence length {length}")
    else:
        raise MaskError(f"unknown mask kind {mask.kind!r}")


def _merge_two(sa, sb, wa, wb):
    """Combine a prefix range [sa, sb) with a window [wa, wb) (wa >= sa), merging when they touch."""
    merged = wa <= sb
    s0 = sa.copy()
    e0 = np.where(merged, np.maximum(sb, wb), sb)
    s1 = np.where(merged, 0, wa)
    e1 = np.where(merged, 0, wb)
    # an empty prefix collapses to the window alone
    empty = sb <= sa
    s0 = np.where(empty, wa, s0)
    e0 = np.where(empty, wb, e0)
    s1 = np.where(empty, 0, s1)
    e1 = np.where(empty, 0, e1)
    return np.stack([s0, s1], axis=1), np.stack([e0, e1], axis=1)


def gen_mask(spec: SequenceSpec) -> AttendRanges:
    validate_mask(spec.mask, spec.length)
    L = spec.length
    i = np.arange(L, dtype=np.int64)
    p = spec.mask.p
    zero = np.zeros(L, dtype=np.int64)
    kind = spec.mask.kind

    if kind == CAUSAL:
        starts, ends = np.stack([zero, zero], 1), np.stack([i + 1, zero], 1)
    elif kind == LAMBDA:
        sink = np.minimum(p["sink_tokens"], i + 1)
        win_lo = np.maximum(0, i - p["window"] + 1)
        starts, ends = _merge_two(zero, sink, win_lo, i + 1)
    elif kind == CAUSAL_BLOCKWISE:
        blk = p["block"]
        nblocks = -(-L // blk)
        b = i // blk
        sink = np.minimum(p.get("sink_blocks", 1) * blk, i + 1)
        win_lo = np.maximum(0, (b - p["window_blocks"] + 1) * blk)
        test_start = max(0, nblocks - p.get("test_blocks", 1)) * blk
        win_lo = np.where(i >= test_start, 0, win_lo)
        starts, ends = _merge_two(zero, sink, win_lo, i + 1)
    else:
        q = p["question_len"]
        seg_start = np.zeros(L, dtype=np.int64)
        s = q
        for a in p["answer_lens"]:
            seg_start[s:s + a] = s
            s += a
        is_answer = i >= q
        prefix_end = np.where(is_answer, q, 0)
        win_lo = np.where(is_answer, seg_start, 0)
        starts, ends = _merge_two(zero, prefix_end, win_lo, i + 1)

    ranges = AttendRanges(starts.astype(np.int64), ends.astype(np.int64))
    _check_ranges(ranges)
    return ranges


def _check_ranges(r: AttendRanges) -> None:
    L = len(r)
    i = np.arange(L)
    nonempty = r.ends > r.starts
    if not nonempty[:, 0].all():
        raise MaskError("a token attends nothing")
    if (r.ends[:, 0] > i + 1).any() or (nonempty[:, 1] & (r.ends[:, 1] > i + 1)).any():
        raise MaskError("mask attends a future token")
    if (nonempty[:, 1] & (r.starts[:, 1] <= r.ends[:, 0])).any():
        raise MaskError("ranges overlap or are unsorted")


def mask_sparsity(batch: Batch, ranges: dict[str, AttendRanges] | None = None) -> float:
    """Attended pairs of the batch's masks over the causal pair count for the same lengths."""
    attended = 0
    causal = 0
    for s in batch.sequences:
        r = ranges[s.seq_id] if ranges is not None else gen_mask(s)
        attended += r.pair_count()
        causal += s.length * (s.length + 1) // 2
    return attended / causal


# --- batch JSONL ---------------------------------------------------------------------------

def write_batch_jsonl(path, header: dict, sequences: Iterable[SequenceSpec]) -> None:
    with open(path, "w") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for s in sequences:
            f.write(json.dumps(s.to_json(), sort_keys=True) + "\n")


def read_batch_jsonl(path) -> tuple[dict, Iterator[SequenceSpec]]:
    """Header dict and a lazy stream of sequences."""
    f = open(path)
    first = f.readline()
    header = json.loads(first) if first.strip() else {}
    if "seq_id" in header:
        raise ValueError(f"{path}: first line must be a batch header, got a sequence")

    def stream():
        with f:
            for line in f:
                if line.strip():
                    yield SequenceSpec.from_json(json.loads(line))

    return header, stream()


def batch_from_header(header: dict, sequences) -> Batch:
    return Batch(tuple(sequences), heads=int(header.get("heads", 8)),
                 kv_groups=int(header.get("kv_groups", 2)), head_dim=int(header.get("head_dim", 128)),
                 token_budget=header.get("token_budget"),
                 bytes_per_element=int(header.get("bytes_per_element", 2)))
