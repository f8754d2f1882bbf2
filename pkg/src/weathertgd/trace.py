"""Replayable run traces and aggregate reports.

A trace is one JSONL file: a header line (run id, config snapshot, template
hashes, series reference, seed call), one line per loop iteration flushed
before the next iteration begins, and a final line with the outcome. Each
backend call record keeps the prompt hash and response text, which is enough
to rebuild a script and replay the run bit-for-bit.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

from .backend import BackendCall, ScriptEntry
from .errors import MalformedInput

TRACE_SUFFIX = ".trace.jsonl"

STOP_CONVERGED = "converged"
STOP_K_MAX = "k_max"
STOP_ERROR = "error"


def _dumps(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def call_record(purpose: str, call: BackendCall) -> dict:
    """JSON-safe record of one backend call."""
    return {
        "purpose": purpose,
        "prompt_tokens": call.response.prompt_tokens,
        "completion_tokens": call.response.completion_tokens,
        "provider": call.response.provider,
        "latency_ms": call.response.latency_ms,
        "prompt_sha256": call.prompt_sha256,
        "response_text": call.response.text,
    }


@dataclass
class RunTrace:
    """In-memory form of one trace file."""

    run_id: str
    config: dict
    template_hashes: dict
    series_ref: dict | None
    seed: dict | None
    iterations: list[dict] = field(default_factory=list)
    final_caption: str | None = None
    stop_reason: str | None = None
    totals: dict = field(default_factory=dict)
    template_texts: dict | None = None

    def all_calls(self) -> list[dict]:
        calls = []
        if self.seed and self.seed.get("backend_call"):
            calls.append(self.seed["backend_call"])
        for record in self.iterations:
            calls.extend(record.get("backend_calls", []))
        return calls

    def compute_totals(self) -> dict:
        calls = self.all_calls()
        return {
            "calls": len(calls),
            "prompt_tokens": sum(c["prompt_tokens"] for c in calls),
            "completion_tokens": sum(c["completion_tokens"] for c in calls),
        }


class TraceWriter:
    """Append-only JSONL writer; each line is flushed as it is written."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file = open(self.path, "w", encoding="utf-8")
        self._iterations_written = 0

    def _write_line(self, obj: dict) -> None:
        self._file.write(_dumps(obj) + "\n")
        self._file.flush()

    def write_header(
        self,
        run_id: str,
        config: dict,
        template_hashes: dict,
        series_ref: dict | None = None,
        template_texts: dict | None = None,
    ) -> None:
        header = {
            "type": "header",
            "run_id": run_id,
            "config": config,
            "template_hashes": template_hashes,
            "series_ref": series_ref,
        }
        if template_texts is not None:
            header["template_texts"] = template_texts
        self._write_line(header)

    def write_seed(self, caption_text: str, backend_call: dict) -> None:
        self._write_line(
            {"type": "seed", "caption": caption_text, "backend_call": backend_call}
        )

    def append_iteration(self, record: dict) -> None:
        if record.get("iteration") != self._iterations_written:
            raise ValueError(
                f"iteration {record.get('iteration')} out of order; "
                f"expected {self._iterations_written}"
            )
        self._write_line({"type": "iteration", **record})
        self._iterations_written += 1

    def finalize(self, final_caption: str, stop_reason: str, totals: dict) -> None:
        self._write_line(
            {
                "type": "final",
                "final_caption": final_caption,
                "stop_reason": stop_reason,
                "totals": totals,
            }
        )

    def close(self) -> None:
        self._file.close()

    def __enter__(self) -> "TraceWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def load_trace(path: str | Path) -> RunTrace:
    """Parse a trace file back into a :class:`RunTrace`."""
    lines = []
    try:
        with open(path, encoding="utf-8") as f:
            for raw in f:
                raw = raw.strip()
                if raw:
                    lines.append(json.loads(raw))
    except OSError as exc:
        raise MalformedInput(f"cannot read trace {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MalformedInput(f"corrupt trace {path}: {exc}") from exc
    if not lines or lines[0].get("type") != "header":
        raise MalformedInput(f"trace {path} has no header line")
    header = lines[0]
    trace = RunTrace(
        run_id=header["run_id"],
        config=header["config"],
        template_hashes=header.get("template_hashes", {}),
        series_ref=header.get("series_ref"),
        seed=None,
        template_texts=header.get("template_texts"),
    )
    for line in lines[1:]:
        kind = line.get("type")
        if kind == "seed":
            trace.seed = {"caption": line["caption"], "backend_call": line["backend_call"]}
        elif kind == "iteration":
            record = dict(line)
            record.pop("type")
            trace.iterations.append(record)
        elif kind == "final":
            trace.final_caption = line["final_caption"]
            trace.stop_reason = line["stop_reason"]
            trace.totals = line["totals"]
        else:
            raise MalformedInput(f"trace {path}: unknown line type {kind!r}")
    return trace


def replay_script(trace: RunTrace) -> list[ScriptEntry]:
    """Script entries (prompt-hash keyed) rebuilt from a trace's calls."""
    entries = []
    for call in trace.all_calls():
        entries.append(
            ScriptEntry(response=call["response_text"], prompt_sha256=call["prompt_sha256"])
        )
    return entries


# --- aggregate reporting -----------------------------------------------------


def report(traces: list[RunTrace], baseline_tokens: int) -> tuple[str, str, str]:
    """Per-run and mean token accounting plus convergence series.

    Returns (report_text, summary_csv, similarity_csv). Relative consumption
    is total tokens (prompt + completion) divided by ``baseline_tokens``.
    """
    if baseline_tokens <= 0:
        raise ValueError("baseline_tokens must be positive")

    rows = []
    for trace in traces:
        totals = trace.totals or trace.compute_totals()
        total_tokens = totals["prompt_tokens"] + totals["completion_tokens"]
        rows.append(
            {
                "run_id": trace.run_id,
                "iterations": len(trace.iterations),
                "calls": totals["calls"],
                "total_tokens": total_tokens,
                "relative_tokens": total_tokens / baseline_tokens,
                "stop_reason": trace.stop_reason or "",
            }
        )

    summary_buf = io.StringIO()
    writer = csv.DictWriter(
        summary_buf,
        fieldnames=["run_id", "iterations", "calls", "total_tokens", "relative_tokens", "stop_reason"],
        lineterminator="\n",
    )
    writer.writeheader()
    for row in rows:
        writer.writerow(row)

    similarity_buf = io.StringIO()
    sim_writer = csv.writer(similarity_buf, lineterminator="\n")
    sim_writer.writerow(["run_id", "iteration", "convergence_similarity"])
    for trace in traces:
        for record in trace.iterations:
            sim_writer.writerow(
                [trace.run_id, record["iteration"], record.get("convergence_similarity", "")]
            )

    lines = [f"runs: {len(rows)}", f"baseline_tokens: {baseline_tokens}"]
    if rows:
        mean_tokens = sum(r["total_tokens"] for r in rows) / len(rows)
        mean_relative = sum(r["relative_tokens"] for r in rows) / len(rows)
        histogram: dict[int, int] = {}
        for r in rows:
            histogram[r["iterations"]] = histogram.get(r["iterations"], 0) + 1
        lines.append(f"mean_total_tokens: {mean_tokens:.1f}")
        lines.append(f"mean_relative_tokens: {mean_relative:.2f}")
        lines.append(
            "iteration_histogram: "
            + " ".join(f"{k}:{v}" for k, v in sorted(histogram.items()))
        )
        for r in rows:
            lines.append(
                f"  {r['run_id']}: iterations={r['iterations']} calls={r['calls']} "
                f"tokens={r['total_tokens']} relative={r['relative_tokens']:.2f} "
                f"stop={r['stop_reason']}"
            )
    return "\n".join(lines), summary_buf.getvalue(), similarity_buf.getvalue()
