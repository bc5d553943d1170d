import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxplan.blocks import KV, O, Q, generate_blocks
from ctxplan.model import Batch, SequenceSpec
from ctxplan.reference import dense_mask
from fixtures import three_sequences, three_tile_question
from test_model import masked_sequences


def test_question_fixture_has_five_tile_pairs():
    g = three_tile_question()
    assert [(c.q_tile, c.kv_tile) for c in g.comp_blocks] == [(0, 0), (1, 0), (1, 1), (2, 0), (2, 2)]
    assert g.num_data == 9
    assert len(g.groups) == 3


def test_sizes_and_flops():
    b = Batch((SequenceSpec("a", 10),), heads=4, kv_groups=2, head_dim=8, bytes_per_element=2)
    g = generate_blocks(b, 4)
    sizes = {(d.kind, d.tile): d.size_bytes for d in g.data_blocks}
    assert sizes[(Q, 0)] == 4 * 8 * 2
    assert sizes[(KV, 0)] == 2 * 4 * 8 * 2
    assert sizes[(O, 2)] == 2 * 8 * 2  # last tile holds 2 tokens
    c = next(c for c in g.comp_blocks if (c.q_tile, c.kv_tile) == (1, 0))
    assert c.attended_pairs == 16
    assert c.flops == 4 * 16 * 8


def test_gqa_groups_share_kv_blocks():
    b = Batch((SequenceSpec("a", 4),), heads=4, kv_groups=2, head_dim=2)
    g = generate_blocks(b, 4)
    kv_of = {c.head: g.data_blocks[c.kv_block].head for c in g.comp_blocks}
    assert kv_of == {0: 0, 1: 0, 2: 1, 3: 1}


def test_per_sequence_block_sizes():
    g = three_sequences()
    assert g.block_sizes == (1, 1, 2)
    assert [len(b) - 1 for b in g.tile_bounds] == [4, 4, 4]


def test_groups_cover_every_data_block_once():
    g = three_sequences()
    members = sorted(b for grp in g.groups for b in grp)
    assert members == list(range(g.num_data))
    for gi, grp in enumerate(g.groups):
        assert len({(g.data_blocks[b].seq, g.data_blocks[b].tile) for b in grp}) == 1
        assert all(g.group_of[b] == gi for b in grp)


@given(masked_sequences(max_len=48), st.integers(1, 12), st.sampled_from([(1, 1), (2, 1), (4, 2)]))
@settings(max_examples=120, deadline=None)
def test_comp_blocks_are_exactly_the_nonempty_tiles(spec, block, hg):
    H, G = hg
    b = Batch((spec,), heads=H, kv_groups=G, head_dim=3)
    g = generate_blocks(b, block)
    dense = dense_mask(spec)
    bounds = g.tile_bounds[0]
    expect = set()
    for i in range(len(bounds) - 1):
        for j in range(len(bounds) - 1):
            if dense[bounds[i]:bounds[i + 1], bounds[j]:bounds[j + 1]].any():
                expect.add((i, j))
    for h in range(H):
        got = {(c.q_tile, c.kv_tile) for c in g.comp_blocks if c.head == h}
        assert got == expect
    total = sum(c.attended_pairs for c in g.comp_blocks)
    assert total == H * dense.sum()
    for c in g.comp_blocks:
        rows = g.tile_mask(c)
        assert int(np.sum(rows[:, 1] - rows[:, 0] + rows[:, 3] - rows[:, 2])) == c.attended_pairs


def test_dump_is_deterministic():
    assert three_sequences().dumps() == three_sequences().dumps()
