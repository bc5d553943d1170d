"""Synthetic long-context length distributions and mask assignment."""

from __future__ import annotations

import numpy as np

from .model import MaskDescriptor, SequenceSpec

# log-normal body plus a Pareto tail, in tokens
DISTRIBUTIONS = {
    "longalign": {"median": 6000.0, "sigma": 0.8, "tail_p": 0.12, "tail_start": 16000.0, "tail_alpha": 1.3,
                  "min_len": 256, "max_len": 65536},
    "ldc": {"median": 1500.0, "sigma": 1.0, "tail_p": 0.06, "tail_start": 8000.0, "tail_alpha": 1.1,
            "min_len": 64, "max_len": 65536},
}
SCALES = (0.5, 1.0, 2.0, 4.0)
MASKS = ("causal", "lambda", "causal_blockwise", "shared_question")


def sample_lengths(dist: str, n: int, seed: int = 0, scale: float = 1.0) -> np.ndarray:
    p = DISTRIBUTIONS[dist]
    rng = np.random.default_rng(seed)
    body = rng.lognormal(np.log(p["median"]), p["sigma"], n)
    tail = p["tail_start"] * (1.0 + rng.pareto(p["tail_alpha"], n))
    x = np.where(rng.random(n) < p["tail_p"], tail, body)
    x = np.clip(x, p["min_len"], p["max_len"]) * scale
    return np.maximum(1, np.round(x)).astype(np.int64)


def mask_for(kind: str, length: int) -> MaskDescriptor:
    """Default mask of each family scaled to ``length``."""
    if kind == "causal":
        return MaskDescriptor.causal()
    if kind == "lambda":
        return MaskDescriptor.lambda_(sink_tokens=min(64, length), window=max(1, min(4096, length // 4)))
    if kind == "causal_blockwise":
        return MaskDescriptor.causal_blockwise(block=max(1, length // 16), window_blocks=2, sink_blocks=1, test_blocks=1)
    if kind == "shared_question":
        if length < 10:
            return MaskDescriptor.causal()
        return MaskDescriptor.shared_question_fractions(length, num_answers=4, answer_fraction=0.2)
    raise ValueError(f"unknown mask kind {kind!r}")


def synthetic_stream(dist: str, n: int, seed: int = 0, scale: float = 1.0, mask: str = "causal",
                     max_len: int | None = None) -> list[SequenceSpec]:
    """``mask`` is a family name or ``"mixed"`` (drawn uniformly per sequence)."""
    lengths = sample_lengths(dist, n, seed, scale)
    if max_len is not None:
        lengths = np.minimum(lengths, max_len)
    rng = np.random.default_rng(seed + 1)
    out = []
    for i, L in enumerate(lengths):
        kind = MASKS[rng.integers(len(MASKS))] if mask == "mixed" else mask
        out.append(SequenceSpec(f"{dist}-{seed}-{i}", int(L), mask_for(kind, int(L))))
    return out
