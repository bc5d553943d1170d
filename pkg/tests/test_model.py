import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxplan.model import (Batch, DeviceTopology, MaskDescriptor, MaskError, SequenceSpec, batch_from_header,
                           gen_mask, mask_sparsity, read_batch_jsonl, write_batch_jsonl)
from ctxplan.reference import dense_mask


@st.composite
def masked_sequences(draw, max_len=64):
    L = draw(st.integers(1, max_len))
    kind = draw(st.sampled_from(["causal", "lambda", "causal_blockwise", "shared_question"]))
    if kind == "causal":
        m = MaskDescriptor.causal()
    elif kind == "lambda":
        m = MaskDescriptor.lambda_(draw(st.integers(0, L)), draw(st.integers(1, L + 2)))
    elif kind == "causal_blockwise":
        m = MaskDescriptor.causal_blockwise(draw(st.integers(1, L + 1)), draw(st.integers(1, 5)),
                                            draw(st.integers(0, 3)), draw(st.integers(0, 3)))
    else:
        q = draw(st.integers(0, L - 1))
        rest = L - q
        cuts = sorted(draw(st.sets(st.integers(1, rest - 1), max_size=min(4, rest - 1)))) if rest > 1 else []
        bounds = [0, *cuts, rest]
        m = MaskDescriptor.shared_question(q, [b - a for a, b in zip(bounds, bounds[1:])])
    return SequenceSpec("x", L, m)


@given(masked_sequences())
@settings(max_examples=300, deadline=None)
def test_ranges_match_dense_definition(spec):
    r = gen_mask(spec)
    assert np.array_equal(r.to_dense(), dense_mask(spec))
    assert r.pair_count() == dense_mask(spec).sum()


@given(masked_sequences(), st.integers(1, 9))
@settings(max_examples=150, deadline=None)
def test_tile_pairs_sum_dense_blocks(spec, block):
    r = gen_mask(spec)
    bounds = np.append(np.arange(0, spec.length, block), spec.length)
    dense = dense_mask(spec)
    pairs = r.tile_pairs(bounds, bounds)
    for i in range(len(bounds) - 1):
        for j in range(len(bounds) - 1):
            assert pairs[i, j] == dense[bounds[i]:bounds[i + 1], bounds[j]:bounds[j + 1]].sum()


@given(masked_sequences(max_len=40), st.data())
@settings(max_examples=100, deadline=None)
def test_tile_rows_reproduce_dense_tile(spec, data):
    L = spec.length
    q0 = data.draw(st.integers(0, L - 1))
    q1 = data.draw(st.integers(q0 + 1, L))
    k0 = data.draw(st.integers(0, L - 1))
    k1 = data.draw(st.integers(k0 + 1, L))
    rows = gen_mask(spec).tile_rows(q0, q1, k0, k1)
    cols = np.arange(k1 - k0)
    got = ((cols >= rows[:, :1]) & (cols < rows[:, 1:2])) | ((cols >= rows[:, 2:3]) & (cols < rows[:, 3:4]))
    assert np.array_equal(got, dense_mask(spec)[q0:q1, k0:k1])


def test_causal_rows():
    r = gen_mask(SequenceSpec("c", 4))
    assert [r.row(i) for i in range(4)] == [[(0, 1)], [(0, 2)], [(0, 3)], [(0, 4)]]


def test_lambda_sink_and_window_split():
    r = gen_mask(SequenceSpec("l", 10, MaskDescriptor.lambda_(2, 3)))
    assert r.row(1) == [(0, 2)]
    assert r.row(4) == [(0, 5)]  # sink and window touch
    assert r.row(9) == [(0, 2), (7, 10)]


def test_shared_question_answers_see_question_and_themselves():
    r = gen_mask(SequenceSpec("q", 7, MaskDescriptor.shared_question(3, [2, 2])))
    assert r.row(2) == [(0, 3)]
    assert r.row(4) == [(0, 5)]
    assert r.row(6) == [(0, 3), (5, 7)]


def test_shared_question_lengths_must_cover_sequence():
    with pytest.raises(MaskError):
        SequenceSpec("q", 8, MaskDescriptor.shared_question(3, [2, 2]))


def test_fraction_form_puts_remainder_on_question():
    m = MaskDescriptor.shared_question_fractions(103, num_answers=4, answer_fraction=0.2)
    assert m.p["answer_lens"] == (20, 20, 20, 20)
    assert m.p["question_len"] == 23
    with pytest.raises(MaskError):
        MaskDescriptor.shared_question_fractions(4, num_answers=4, answer_fraction=0.2)


def test_unknown_kind_rejected():
    with pytest.raises(MaskError):
        MaskDescriptor.make("bidirectional")


def test_mask_json_round_trip():
    for m in (MaskDescriptor.causal(), MaskDescriptor.lambda_(4, 9), MaskDescriptor.causal_blockwise(3, 2, 1, 0),
              MaskDescriptor.shared_question(2, [3, 1])):
        assert MaskDescriptor.from_json(json.loads(json.dumps(m.to_json()))) == m
    m = MaskDescriptor.from_json({"kind": "shared_question", "num_answers": 2, "answer_fraction": 0.25}, length=8)
    assert m.p["answer_lens"] == (2, 2)


def test_sparsity_of_causal_is_one_and_window_smaller():
    b = Batch((SequenceSpec("a", 32),), heads=1, kv_groups=1)
    assert mask_sparsity(b) == 1.0
    w = Batch((SequenceSpec("a", 32, MaskDescriptor.lambda_(1, 4)),), heads=1, kv_groups=1)
    dense = dense_mask(w.sequences[0]).sum()
    assert mask_sparsity(w) == pytest.approx(dense / (32 * 33 / 2))


def test_batch_validation():
    with pytest.raises(ValueError):
        Batch((SequenceSpec("a", 4),), heads=3, kv_groups=2)
    with pytest.raises(ValueError):
        Batch((SequenceSpec("a", 4), SequenceSpec("a", 4)))
    with pytest.raises(ValueError):
        Batch((SequenceSpec("a", 40),), token_budget=10)
    b = Batch((SequenceSpec("a", 4),), heads=8, kv_groups=2)
    assert [b.kv_group_of(h) for h in range(8)] == [0, 0, 0, 0, 1, 1, 1, 1]


def test_topology_links():
    t = DeviceTopology(2, 4)
    assert t.num_devices == 8
    assert t.machine_of(5) == 1
    assert t.link(0, 3) == (t.latency_intra, t.intra_bw)
    assert t.link(3, 4) == (t.latency_inter, t.inter_bw)


def test_jsonl_round_trip(tmp_path):
    seqs = [SequenceSpec("a", 10, MaskDescriptor.lambda_(2, 3)), SequenceSpec("b", 7)]
    header = {"heads": 2, "kv_groups": 1, "head_dim": 8, "token_budget": 64}
    write_batch_jsonl(tmp_path / "b.jsonl", header, seqs)
    h, stream = read_batch_jsonl(tmp_path / "b.jsonl")
    batch = batch_from_header(h, stream)
    assert list(batch.sequences) == seqs
    assert (batch.heads, batch.kv_groups, batch.head_dim, batch.token_budget) == (2, 1, 8, 64)


def test_jsonl_requires_header(tmp_path):
    p = tmp_path / "b.jsonl"
    p.write_text(json.dumps(SequenceSpec("a", 3).to_json()) + "\n")
    with pytest.raises(ValueError):
        read_batch_jsonl(p)
