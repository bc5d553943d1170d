"""Dense reference implementations used as oracles: boolean masks and masked attention.

Everything here materializes ``L x L`` matrices on purpose and shares no code with
the range-based paths it checks.
"""

from __future__ import annotations

import numpy as np

from .model import CAUSAL, CAUSAL_BLOCKWISE, LAMBDA, SHARED_QUESTION, Batch, SequenceSpec


def dense_mask(spec: SequenceSpec) -> np.ndarray:
    L = spec.length
    p = spec.mask.p
    m = np.zeros((L, L), dtype=bool)
    for i in range(L):
        for j in range(i + 1):
            if spec.mask.kind == CAUSAL:
                ok = True
            elif spec.mask.kind == LAMBDA:
                ok = j < p["sink_tokens"] or i - j < p["window"]
            elif spec.mask.kind == CAUSAL_BLOCKWISE:
                blk = p["block"]
                nblocks = -(-L // blk)
                bi, bj = i // blk, j // blk
                if bi >= nblocks - p.get("test_blocks", 1):
                    ok = True
                else:
                    ok = bj < p.get("sink_blocks", 1) or bi - bj < p["window_blocks"]
            elif spec.mask.kind == SHARED_QUESTION:
                q = p["question_len"]
                if i < q:
                    ok = True
                else:
                    seg = _segment(q, p["answer_lens"], i)
                    ok = j < q or _segment(q, p["answer_lens"], j) == seg
            else:
                raise ValueError(spec.mask.kind)
            m[i, j] = ok
    return m


def _segment(q, answers, t):
    if t < q:
        return -1
    s = q
    for k, a in enumerate(answers):
        if t < s + a:
            return k
        s += a
    return len(answers)


def dense_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Masked softmax attention of one head; ``q, k, v`` are ``[L, D]``."""
    d = q.shape[-1]
    s = q @ k.T / np.sqrt(d)
    s = np.where(mask, s, -np.inf)
    s = s - s.max(axis=1, keepdims=True)
    w = np.exp(s)
    w /= w.sum(axis=1, keepdims=True)
    return w @ v


def make_payload(batch: Batch, seed: int = 0, dim: int | None = None) -> dict[str, tuple]:
    """Seeded float64 ``(Q[H,L,D], K[G,L,D], V[G,L,D])`` per sequence."""
    rng = np.random.default_rng(seed)
    d = dim or batch.head_dim
    out = {}
    for s in batch.sequences:
        out[s.seq_id] = (rng.standard_normal((batch.heads, s.length, d)),
                         rng.standard_normal((batch.kv_groups, s.length, d)),
                         rng.standard_normal((batch.kv_groups, s.length, d)))
    return out


def dense_batch_attention(batch: Batch, payload) -> dict[str, np.ndarray]:
    out = {}
    for s in batch.sequences:
        q, k, v = payload[s.seq_id]
        m = dense_mask(s)
        o = np.empty_like(q)
        for h in range(batch.heads):
            g = batch.kv_group_of(h)
            o[h] = dense_attention(q[h], k[g], v[g], m)
        out[s.seq_id] = o
    return out
