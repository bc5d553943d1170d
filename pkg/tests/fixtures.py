"""Small hand-built batches with known answers."""

from __future__ import annotations

import numpy as np

from ctxplan.baselines import zigzag_chunk
from ctxplan.blocks import generate_blocks
from ctxplan.model import Batch, DeviceTopology, MaskDescriptor, SequenceSpec
from ctxplan.placement import PlacementResult


def three_sequences():
    """Two short causal sequences and one twice as long, unit sizes, tiled so each has 4 tiles."""
    seqs = (SequenceSpec("a", 4), SequenceSpec("b", 4), SequenceSpec("c", 8))
    b = Batch(seqs, heads=1, kv_groups=1, head_dim=1, bytes_per_element=1)
    return generate_blocks(b, {"a": 1, "b": 1, "c": 2})


def _by_tile(g, device_of, name):
    group_dev = np.array([device_of(si, t) for si, t in g.group_key], dtype=np.int64)
    data_dev = group_dev[g.group_of]
    comp_dev = np.array([data_dev[c.q_block] for c in g.comp_blocks], dtype=np.int64)
    return PlacementResult(g, DeviceTopology.flat(2), group_dev, comp_dev, name=name)


def all_sequences_split(g):
    """Every sequence zigzag-split over both devices."""
    return _by_tile(g, lambda si, t: zigzag_chunk(t, len(g.tile_bounds[si]) - 1, 2), "cp")


def short_whole_long_split(g):
    """Short sequences kept whole on one device each; only the long one is split."""
    def dev(si, t):
        if si < 2:
            return si
        return zigzag_chunk(t, len(g.tile_bounds[si]) - 1, 2)
    return _by_tile(g, dev, "mixed")


def shared_question_ring():
    """One question of 2 blocks and four answers of 4, 3, 3, 4 blocks; 16 KV blocks of 4 tokens."""
    s = SequenceSpec("qa", 64, MaskDescriptor.shared_question(8, [16, 12, 12, 16]))
    return generate_blocks(Batch((s,), heads=1, kv_groups=1, head_dim=1, bytes_per_element=1), 4)


def three_tile_question():
    """Question tile plus two answer tiles: 5 non-empty tile pairs."""
    s = SequenceSpec("s", 6, MaskDescriptor.shared_question(2, [2, 2]))
    return generate_blocks(Batch((s,), heads=1, kv_groups=1, head_dim=4), 2)
