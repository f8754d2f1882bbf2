"""Trace persistence, replay script extraction, and reporting."""

from __future__ import annotations

import json
import random

import pytest

from weathertgd.errors import MalformedInput
from weathertgd.trace import RunTrace, TraceWriter, load_trace, replay_script, report


def _record(iteration: int, rng: random.Random | None = None) -> dict:
    rng = rng or random.Random(iteration)
    calls = [
        {
            "purpose": purpose,
            "prompt_tokens": rng.randint(1, 500),
            "completion_tokens": rng.randint(1, 500),
            "provider": "scripted",
            "latency_ms": 0,
            "prompt_sha256": f"{rng.getrandbits(128):032x}",
            "response_text": f"response {iteration} {purpose}",
        }
        for purpose in ("gradient:stat", "gradient:phys", "gradient:met", "fusion", "update")
    ]
    return {
        "iteration": iteration,
        "gradients": {
            "stat": {"raw_text": f"raw {iteration}", "fragments": [{"text": "a b c", "role": "stat", "ordinal": 0}]}
        },
        "groups": [[0, 1]] if iteration % 2 else [],
        "consensus": [],
        "unique": [],
        "discarded": [],
        "fused_text": f"fused {iteration}",
        "caption_before": f"before {iteration}",
        "caption_after": f"after {iteration}",
        "convergence_similarity": rng.random(),
        "compressed": bool(iteration % 2),
        "backend_calls": calls,
    }


def _header_args():
    return dict(
        run_id="r1",
        config={"optimizer": {"k_max": 5}},
        template_hashes={"fusion": "ab" * 32},
        series_ref={"path": "x.csv", "sha256": "cd" * 32, "format": "csv", "allow_gaps": False},
    )


def test_append_three_records_gives_header_plus_three_lines(tmp_path):
    path = tmp_path / "t.trace.jsonl"
    with TraceWriter(path) as writer:
        writer.write_header(**_header_args())
        for i in range(3):
            writer.append_iteration(_record(i))
    lines = path.read_text().splitlines()
    assert len(lines) == 4
    assert json.loads(lines[0])["type"] == "header"
    assert [json.loads(l)["type"] for l in lines[1:]] == ["iteration"] * 3


def test_lines_flushed_before_next_iteration(tmp_path):
    path = tmp_path / "t.trace.jsonl"
    writer = TraceWriter(path)
    writer.write_header(**_header_args())
    writer.append_iteration(_record(0))
    writer.append_iteration(_record(1))
    # file readable mid-run without closing: simulates a killed process
    lines = path.read_text().splitlines()
    assert len(lines) == 3
    writer.close()
    partial = load_trace(path)
    assert len(partial.iterations) == 2
    assert partial.final_caption is None


def test_out_of_order_iteration_rejected(tmp_path):
    writer = TraceWriter(tmp_path / "t.trace.jsonl")
    writer.write_header(**_header_args())
    with pytest.raises(ValueError):
        writer.append_iteration(_record(1))
    writer.close()


def test_round_trip_structural_equality(tmp_path):
    rng = random.Random(5)
    for case in range(25):
        path = tmp_path / f"t{case}.trace.jsonl"
        records = [_record(i, rng) for i in range(rng.randint(1, 5))]
        seed_call = {
            "purpose": "seed",
            "prompt_tokens": 10,
            "completion_tokens": 4,
            "provider": "scripted",
            "latency_ms": 0,
            "prompt_sha256": "ef" * 32,
            "response_text": "seed text",
        }
        with TraceWriter(path) as writer:
            writer.write_header(**_header_args())
            writer.write_seed("seed text", seed_call)
            for record in records:
                writer.append_iteration(record)
            writer.finalize("final", "converged", {"calls": 1, "prompt_tokens": 2, "completion_tokens": 3})
        trace = load_trace(path)
        assert trace.iterations == records
        assert trace.seed == {"caption": "seed text", "backend_call": seed_call}
        assert trace.final_caption == "final"
        assert trace.stop_reason == "converged"
        assert trace.series_ref == _header_args()["series_ref"]


def test_load_trace_rejects_garbage(tmp_path):
    path = tmp_path / "bad.trace.jsonl"
    path.write_text("not json\n")
    with pytest.raises(MalformedInput):
        load_trace(path)
    path.write_text('{"type": "iteration"}\n')
    with pytest.raises(MalformedInput, match="header"):
        load_trace(path)


def test_replay_script_covers_every_call(tmp_path):
    path = tmp_path / "t.trace.jsonl"
    with TraceWriter(path) as writer:
        writer.write_header(**_header_args())
        writer.write_seed(
            "seed",
            {
                "purpose": "seed",
                "prompt_tokens": 1,
                "completion_tokens": 1,
                "provider": "scripted",
                "latency_ms": 0,
                "prompt_sha256": "11" * 32,
                "response_text": "seed",
            },
        )
        writer.append_iteration(_record(0))
        writer.finalize("final", "k_max", {"calls": 6, "prompt_tokens": 0, "completion_tokens": 0})
    trace = load_trace(path)
    entries = replay_script(trace)
    assert len(entries) == 6
    assert all(e.prompt_sha256 for e in entries)
    assert entries[0].response == "seed"


# --- report -------------------------------------------------------------------


def _trace_with_tokens(run_id: str, per_call: list[tuple[int, int]]) -> RunTrace:
    calls = [
        {
            "purpose": "update",
            "prompt_tokens": p,
            "completion_tokens": c,
            "provider": "scripted",
            "latency_ms": 0,
            "prompt_sha256": "00" * 32,
            "response_text": "x",
        }
        for p, c in per_call
    ]
    record = {
        "iteration": 0,
        "backend_calls": calls,
        "convergence_similarity": 0.5,
    }
    trace = RunTrace(
        run_id=run_id,
        config={},
        template_hashes={},
        series_ref=None,
        seed=None,
        iterations=[record],
        final_caption="f",
        stop_reason="k_max",
    )
    trace.totals = trace.compute_totals()
    return trace


def test_report_relative_consumption_exact():
    trace = _trace_with_tokens("r", [(2000, 500), (700, 300)])
    text, summary_csv, _ = report([trace], baseline_tokens=1000)
    assert "relative=3.50" in text
    assert ",3.5," in summary_csv


def test_report_matches_oracle_recomputation():
    rng = random.Random(9)
    traces = []
    for i in range(10):
        per_call = [(rng.randint(1, 400), rng.randint(1, 400)) for _ in range(rng.randint(1, 8))]
        traces.append(_trace_with_tokens(f"run{i}", per_call))
    baseline = 1234
    _, summary_csv, _ = report(traces, baseline_tokens=baseline)
    rows = summary_csv.strip().splitlines()[1:]
    for trace, row in zip(traces, rows):
        oracle_total = sum(
            c["prompt_tokens"] + c["completion_tokens"] for c in trace.all_calls()
        )
        cells = row.split(",")
        assert int(cells[3]) == oracle_total
        assert float(cells[4]) == pytest.approx(oracle_total / baseline, abs=1e-12)


def test_report_empty_list():
    text, summary_csv, similarity_csv = report([], baseline_tokens=100)
    assert "runs: 0" in text
    assert summary_csv.splitlines()[0].startswith("run_id")
    assert similarity_csv.splitlines()[0].startswith("run_id")


def test_report_similarity_series():
    trace = _trace_with_tokens("r", [(10, 10)])
    trace.iterations[0]["convergence_similarity"] = 0.875
    _, _, similarity_csv = report([trace], baseline_tokens=10)
    assert "r,0,0.875" in similarity_csv


def test_report_requires_positive_baseline():
    with pytest.raises(ValueError):
        report([], baseline_tokens=0)
