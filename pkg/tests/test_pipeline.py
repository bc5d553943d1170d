import csv
import io
import json

import numpy as np
import pytest

from ctxplan.cli import main
from ctxplan.datasets import DISTRIBUTIONS, MASKS, mask_for, sample_lengths, synthetic_stream
from ctxplan.model import SequenceSpec
from ctxplan.pipeline import EventLog, OversizedSequence, PipelineConfig, make_batches, pipeline_run


def seqs(*lengths):
    return [SequenceSpec(f"s{i}", L) for i, L in enumerate(lengths)]


def test_greedy_fill():
    out = list(make_batches(seqs(4, 4, 4), 10))
    assert [[s.length for s in b] for b in out] == [[4, 4], [4]]


def test_oversized_sequence_raises():
    with pytest.raises(OversizedSequence):
        list(make_batches(seqs(4, 11), 10))


def test_empty_stream():
    assert list(make_batches([], 10)) == []


def test_batches_replay_the_stream():
    stream = synthetic_stream("longalign", 200, seed=3, scale=1 / 8, max_len=8192)
    batches = list(make_batches(stream, 16384))
    assert [s for b in batches for s in b] == stream
    for a, b in zip(batches, batches[1:]):
        assert sum(s.length for s in a) <= 16384
        # the next batch's first sequence did not fit
        assert sum(s.length for s in a) + b[0].length > 16384


def tiny_config(**kw):
    base = dict(block_size=4, divisions=2, machines=1, devices_per_machine=2, token_budget=48, heads=1,
                kv_groups=1, head_dim=2, eps_data=0.5, eps_intra=0.3)
    return PipelineConfig(**(base | kw))


def tiny_batches(n, seed=0):
    rng = np.random.default_rng(seed)
    stream = [SequenceSpec(f"x{i}", int(L), mask_for(MASKS[i % 4], int(L)))
              for i, L in enumerate(rng.integers(8, 24, 3 * n))]
    return list(make_batches(stream, 48))[:n]


@pytest.mark.parametrize("k", [0, 1, 3])
def test_event_log_contract(k):
    res = pipeline_run(tiny_config(lookahead=k), tiny_batches(10))
    assert res.events.check(k) == []
    assert len(res.reports) == 10
    assert all("error" not in r for r in res.reports)


def test_no_lookahead_alternates_plan_and_simulate():
    res = pipeline_run(tiny_config(lookahead=0), tiny_batches(4))
    order = [(e, i) for e, i in res.events.events if e in ("plan_done", "simulate_start")]
    assert order == [(e, i) for i in range(4) for e in ("plan_done", "simulate_start")]


def test_check_flags_violations():
    log = EventLog()
    for e, i in [("plan_start", 0), ("plan_start", 1), ("plan_start", 2), ("simulate_start", 0)]:
        log.add(e, i)
    problems = log.check(1)
    assert any("before its plan" in p for p in problems)
    assert any("in flight" in p for p in problems)


def test_failed_iteration_is_isolated():
    batches = tiny_batches(3)
    batches[1] = [SequenceSpec("big", 40)]  # one indivisible block exceeds the tight data cap
    res = pipeline_run(tiny_config(block_size=64, eps_data=0.05, lookahead=1), batches)
    assert "error" in res.reports[1]
    assert res.events.check(1) == []


def test_numeric_pipeline_is_exact():
    res = pipeline_run(tiny_config(numeric=True), tiny_batches(3))
    assert all(r["sim"]["max_abs_error"] < 1e-10 for r in res.reports)


def test_reports_are_byte_identical():
    a = pipeline_run(tiny_config(lookahead=2, seed=5), tiny_batches(6, seed=1))
    b = pipeline_run(tiny_config(lookahead=2, seed=5), tiny_batches(6, seed=1))
    assert a.dumps() == b.dumps()
    assert a.to_csv() == b.to_csv()
    assert len(list(csv.DictReader(io.StringIO(a.to_csv())))) == 6


def test_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(lookahead=-1)
    with pytest.raises(ValueError):
        PipelineConfig(mode="train")


@pytest.mark.parametrize("dist", sorted(DISTRIBUTIONS))
def test_length_distributions(dist):
    x = sample_lengths(dist, 4000, seed=0)
    p = DISTRIBUTIONS[dist]
    assert x.min() >= p["min_len"] and x.max() <= p["max_len"]
    assert abs(np.median(x) / p["median"] - 1) < 0.15
    # the heavy tail pushes the mean above the median
    assert x.mean() > np.median(x)
    assert (sample_lengths(dist, 50, seed=4) == sample_lengths(dist, 50, seed=4)).all()
    half = sample_lengths(dist, 50, seed=4, scale=0.5)
    assert np.all(np.abs(half - sample_lengths(dist, 50, seed=4) / 2) <= 1)


@pytest.mark.parametrize("kind", MASKS)
@pytest.mark.parametrize("L", [1, 9, 10, 100, 5000])
def test_default_masks_are_valid(kind, L):
    SequenceSpec("s", L, mask_for(kind, L))


def test_mixed_stream_uses_every_family():
    kinds = {s.mask.kind for s in synthetic_stream("ldc", 200, seed=1, scale=0.1, mask="mixed")}
    assert kinds == set(MASKS)


def test_cli_end_to_end(tmp_path, capsys):
    data = tmp_path / "d.jsonl"
    assert main(["gen-data", "--dist", "ldc", "--scale", "0.01", "--count", "12", "--mask", "mixed",
                 "--heads", "1", "--kv-groups", "1", "--head-dim", "2", "--token-budget", "96",
                 "--out", str(data)]) == 0
    common = ["--block-size", "8", "--divisions", "2", "--devices-per-machine", "2", "--eps-data", "0.5",
              "--eps-intra", "0.3", "--lookahead", "1", "--seed", "1"]
    assert main(["simulate", str(data), *common, "--numeric", "--out", str(tmp_path / "sim")]) == 0
    reports = json.loads((tmp_path / "sim" / "reports.json").read_text())
    assert reports and all(r["sim"]["max_abs_error"] < 1e-10 for r in reports if "sim" in r)
    assert (tmp_path / "sim" / "reports.csv").exists()
    assert main(["plan", str(data), *common, "--out", str(tmp_path / "plan")]) == 0
    assert list((tmp_path / "plan" / "iter0000").glob("device*.json"))
    for b in ("ring", "zigzag", "dp"):
        assert main(["compare", str(data), *common, "--baseline", b, "--out", str(tmp_path / "cmp")]) == 0
    rows = json.loads((tmp_path / "cmp" / "compare_ring.json").read_text())
    assert all("ring_kv_transfers" in r for r in rows)
    assert main(["sweep", str(data), *common, "--param", "block_size", "--values", "4", "8",
                 "--out", str(tmp_path / "sw")]) == 0
    assert (tmp_path / "sw" / "sweep_block_size.csv").exists()
