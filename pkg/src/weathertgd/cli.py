"""Command-line interface.

Commands:
  caption   optimize a caption for one series and print it
  evaluate  score a JSONL batch of captions (metrics and/or LLM judge)
  stats     print the statistical summary of a series
  replay    re-execute a recorded trace and verify the final caption
  ablate    run the full configuration plus the seven ablation variants

Exit codes: 0 success, 1 validation/input error (including replay
divergence), 2 backend/provider failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import evaluation, optimizer, series as series_mod, trace as trace_mod
from .agents import TemplateLibrary
from .backend import (
    Backend,
    RemoteProvider,
    ResponseCache,
    ScriptedProvider,
    load_script,
)
from .config import RunConfig, apply_overrides, from_snapshot, load_config
from .embed import LocalEmbedder, RemoteEmbedder
from .errors import (
    BackendError,
    ConfigError,
    MalformedInput,
    ReplayDivergence,
    ValidationError,
    WeatherTGDError,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_BACKEND = 2

ABLATION_VARIANTS = (
    "full",
    "no_consensus_fusion",
    "no_unique_integration",
    "no_physics_agent",
    "no_meteorology_agent",
    "no_statistical_agent",
    "single_pass",
    "no_length_constraint",
)


def build_backend(config: RunConfig) -> Backend:
    """Construct the completion backend selected by the config."""
    settings = config.backend
    if settings.provider == "scripted":
        if not settings.script:
            raise ConfigError("scripted backend requires [backend] script = <path>")
        return Backend(ScriptedProvider(load_script(settings.script)))
    if settings.provider == "remote":
        cache = ResponseCache(config.cache.dir) if config.cache.enabled else None
        return Backend(
            RemoteProvider(settings.endpoint, timeout_s=settings.timeout_s),
            cache=cache,
        )
    raise ConfigError(f"unknown backend provider {settings.provider!r}")


def build_embedder(config: RunConfig):
    settings = config.embedding
    if settings.provider == "local":
        return LocalEmbedder()
    if settings.provider == "remote":
        if not settings.endpoint:
            raise ConfigError("remote embedding requires [embedding] endpoint")
        return RemoteEmbedder(settings.endpoint, settings.model)
    raise ConfigError(f"unknown embedding provider {settings.provider!r}")


def _series_format(path: Path, explicit: str | None) -> str:
    if explicit:
        return explicit
    if path.suffix.lower() == ".json":
        return "json"
    return "csv"


def _load_series(path: str, fmt: str | None, allow_gaps: bool):
    p = Path(path)
    try:
        data = p.read_bytes()
    except OSError as exc:
        raise MalformedInput(f"cannot read series file {path}: {exc}") from exc
    resolved = _series_format(p, fmt)
    series = series_mod.parse_series(data, resolved, allow_gaps=allow_gaps)
    ref = {
        "path": str(p),
        "sha256": hashlib.sha256(data).hexdigest(),
        "format": resolved,
        "allow_gaps": allow_gaps,
    }
    return series, ref


def _config_from_args(args) -> RunConfig:
    config = load_config(args.config)
    return apply_overrides(
        config,
        trace_dir=args.trace_dir,
        cache_dir=args.cache_dir,
        seed_role=args.seed_role,
        trace_similarities=args.trace_similarities,
        jobs=args.jobs,
    )


# --- commands -----------------------------------------------------------------


def cmd_caption(args) -> int:
    config = _config_from_args(args)
    series, series_ref = _load_series(args.series, args.format, args.allow_gaps)
    backend = build_backend(config)
    embedder = build_embedder(config)
    templates = TemplateLibrary(config.templates.dir)
    result = optimizer.run(
        series,
        config,
        backend,
        embedder,
        templates,
        run_id=args.run_id,
        trace_dir=config.trace.dir,
        series_ref=series_ref,
    )
    print(result.caption.text)
    logger.info("trace written to %s", result.trace_path)
    return EXIT_OK


def cmd_stats(args) -> int:
    series, _ = _load_series(args.series, args.format, args.allow_gaps)
    summary = series_mod.summarize(series)
    print(series_mod.render_summary(summary))
    return EXIT_OK


def _evaluate_sample(entry: dict, config: RunConfig, templates, args) -> dict:
    row: dict = {"id": entry["id"]}
    references = entry.get("references") or []
    if references:
        row["bleu4"] = evaluation.bleu4(entry["caption"], references)
        best = max(evaluation.rouge_l(entry["caption"], ref)[2] for ref in references)
        row["rouge_l_f1"] = best
    if args.judge:
        series, _ = _load_series(entry["series_file"], None, args.allow_gaps)
        table = series_mod.render_table(series, config.series_max_rows)
        backend = build_backend(config)
        score = evaluation.judge(
            backend,
            templates,
            entry["caption"],
            table,
            model=config.backend.model,
            sample_index=entry["_index"],
            temperature=config.backend.temperature,
            max_tokens=config.backend.max_tokens,
        )
        row.update(score.as_dict())
    return row


def cmd_evaluate(args) -> int:
    config = _config_from_args(args)
    templates = TemplateLibrary(config.templates.dir)
    batch_path = Path(args.batch)
    entries = []
    try:
        with open(batch_path, encoding="utf-8") as f:
            for i, line in enumerate(f):
                line = line.strip()
                if not line:
                    continue
                entry = json.loads(line)
                entry["_index"] = i
                entries.append(entry)
    except OSError as exc:
        raise MalformedInput(f"cannot read batch {batch_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MalformedInput(f"invalid JSONL in {batch_path}: {exc}") from exc
    for entry in entries:
        if "id" not in entry or "caption" not in entry:
            raise MalformedInput("each batch entry needs 'id' and 'caption' fields")

    if config.jobs > 1:
        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            rows = list(
                pool.map(lambda e: _evaluate_sample(e, config, templates, args), entries)
            )
    else:
        rows = [_evaluate_sample(e, config, templates, args) for e in entries]

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scores_path = out_dir / f"{batch_path.stem}.scores.jsonl"
    with open(scores_path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")

    metric_columns = [
        c for c in ("bleu4", "rouge_l_f1", "sa", "pc", "mr", "oq")
        if any(c in row for row in rows)
    ]
    summary_path = out_dir / f"{batch_path.stem}.summary.csv"
    with open(summary_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["metric", "mean", "samples"])
        for column in metric_columns:
            values = [row[column] for row in rows if column in row]
            mean = sum(values) / len(values)
            # Judge dimensions are reported to one decimal place; NLG
            # metrics to three.
            rendered = f"{mean:.1f}" if column in ("sa", "pc", "mr", "oq") else f"{mean:.3f}"
            writer.writerow([column, rendered, len(values)])
    print(f"wrote {scores_path} and {summary_path}")
    return EXIT_OK


def _variant_config(config: RunConfig, variant: str) -> RunConfig:
    if variant == "full":
        return config
    if variant == "no_consensus_fusion":
        return replace(config, fusion=replace(config.fusion, enabled=False))
    if variant == "no_unique_integration":
        return replace(config, fusion=replace(config.fusion, unique_integration=False))
    if variant == "no_physics_agent":
        return replace(config, roles=("stat", "met"))
    if variant == "no_meteorology_agent":
        return replace(config, roles=("stat", "phys"))
    if variant == "no_statistical_agent":
        return replace(config, roles=("phys", "met"))
    if variant == "single_pass":
        return replace(config, optimizer=replace(config.optimizer, single_pass=True))
    if variant == "no_length_constraint":
        return replace(
            config, optimizer=replace(config.optimizer, length_constraint_enabled=False)
        )
    raise ValueError(f"unknown ablation variant {variant!r}")


def cmd_ablate(args) -> int:
    config = _config_from_args(args)
    series, series_ref = _load_series(args.series, args.format, args.allow_gaps)
    templates = TemplateLibrary(config.templates.dir)
    trace_dir = Path(config.trace.dir)

    rows = []
    for variant in ABLATION_VARIANTS:
        variant_config = _variant_config(config, variant)
        embedder = build_embedder(variant_config)
        try:
            backend = build_backend(variant_config)
            result = optimizer.run(
                series,
                variant_config,
                backend,
                embedder,
                templates,
                run_id=f"ablation-{variant}",
                trace_dir=trace_dir,
                series_ref=series_ref,
            )
            totals = result.trace.totals
            iterations = len(result.trace.iterations)
            gradient_calls = sum(
                1
                for record in result.trace.iterations
                for call in record["backend_calls"]
                if call["purpose"].startswith("gradient:")
            )
            rows.append(
                {
                    "variant": variant,
                    "iterations": iterations,
                    "calls": totals["calls"],
                    "gradient_calls_per_iteration": gradient_calls // iterations,
                    "total_tokens": totals["prompt_tokens"] + totals["completion_tokens"],
                    "final_tokens": result.caption.token_count,
                    "stop_reason": result.trace.stop_reason,
                    "error": "",
                }
            )
        except WeatherTGDError as exc:
            logger.error("variant %s failed: %s", variant, exc)
            rows.append(
                {
                    "variant": variant,
                    "iterations": "",
                    "calls": "",
                    "gradient_calls_per_iteration": "",
                    "total_tokens": "",
                    "final_tokens": "",
                    "stop_reason": "error",
                    "error": str(exc),
                }
            )

    comparison_path = trace_dir / "ablation.csv"
    comparison_path.parent.mkdir(parents=True, exist_ok=True)
    with open(comparison_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(
            f,
            fieldnames=[
                "variant",
                "iterations",
                "calls",
                "gradient_calls_per_iteration",
                "total_tokens",
                "final_tokens",
                "stop_reason",
                "error",
            ],
            lineterminator="\n",
        )
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {comparison_path}")
    return EXIT_OK if all(r["error"] == "" for r in rows) else EXIT_VALIDATION


def cmd_replay(args) -> int:
    recorded = trace_mod.load_trace(args.trace)
    if recorded.final_caption is None:
        raise MalformedInput(f"trace {args.trace} is incomplete (no final line)")
    if not recorded.series_ref or not recorded.series_ref.get("path"):
        raise MalformedInput(f"trace {args.trace} has no series reference")

    ref = recorded.series_ref
    series_path = Path(ref["path"])
    try:
        data = series_path.read_bytes()
    except OSError as exc:
        raise MalformedInput(f"cannot read series file {series_path}: {exc}") from exc
    if hashlib.sha256(data).hexdigest() != ref.get("sha256"):
        raise ReplayDivergence(f"series file {series_path} changed since recording")
    series = series_mod.parse_series(
        data, ref.get("format", "csv"), allow_gaps=ref.get("allow_gaps", False)
    )

    config = from_snapshot(recorded.config)
    # Sequential dispatch keeps prompt-hash FIFO lookups in recorded order.
    config = replace(config, concurrent_agents=False)
    backend = Backend(ScriptedProvider(trace_mod.replay_script(recorded)))
    embedder = build_embedder(config)
    templates = TemplateLibrary(config.templates.dir)

    try:
        result = optimizer.run(
            series, config, backend, embedder, templates, run_id=recorded.run_id
        )
    except WeatherTGDError as exc:
        raise ReplayDivergence(f"replay did not follow the recorded run: {exc}") from exc

    if result.caption.text != recorded.final_caption:
        raise ReplayDivergence(
            "final caption differs from the recorded one:\n"
            f"  recorded: {recorded.final_caption!r}\n"
            f"  replayed: {result.caption.text!r}"
        )
    print("identical")
    return EXIT_OK


def cmd_report(args) -> int:
    traces = [trace_mod.load_trace(path) for path in args.traces]
    text, summary_csv, similarity_csv = trace_mod.report(traces, args.baseline_tokens)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report-summary.csv").write_text(summary_csv, encoding="utf-8")
    (out_dir / "report-similarity.csv").write_text(similarity_csv, encoding="utf-8")
    print(text)
    return EXIT_OK


# --- argument parsing ---------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="TOML config file")
    parser.add_argument("--trace-dir", help="directory for trace files")
    parser.add_argument("--cache-dir", help="directory for the response cache")
    parser.add_argument("--jobs", type=int, default=None, help="parallel workers for batch commands")
    parser.add_argument(
        "--seed-role",
        choices=("stat", "phys", "met"),
        help="agent that writes the initial caption",
    )
    parser.add_argument(
        "--trace-similarities",
        action="store_true",
        help="record full pairwise fragment similarities in traces",
    )


def _add_series_arg(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("series", help="series file (CSV or JSON)")
    parser.add_argument("--format", choices=("csv", "json"), help="series file format")
    parser.add_argument(
        "--allow-gaps",
        action="store_true",
        help="linearly interpolate interior missing values",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="weathertgd",
        description="Multi-agent weather caption optimization via text gradient descent.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("caption", help="optimize a caption for one series")
    _add_series_arg(p)
    _add_common(p)
    p.add_argument("--run-id", help="explicit run id (default: content hash)")
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("stats", help="print the statistical summary of a series")
    _add_series_arg(p)
    _add_common(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("evaluate", help="score a JSONL batch of captions")
    p.add_argument("batch", help="JSONL batch file (id, caption, series_file, references)")
    _add_common(p)
    p.add_argument("--judge", action="store_true", help="run LLM-judge scoring")
    p.add_argument("--out-dir", default=".", help="output directory")
    p.add_argument("--allow-gaps", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("replay", help="re-execute a recorded trace and verify it")
    p.add_argument("trace", help="trace file to replay")
    _add_common(p)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("ablate", help="run the full config plus seven ablation variants")
    _add_series_arg(p)
    _add_common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="aggregate token/convergence report over traces")
    p.add_argument("traces", nargs="+", help="trace files")
    p.add_argument("--baseline-tokens", type=int, required=True)
    p.add_argument("--out-dir", default=".", help="output directory")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ReplayDivergence as exc:
        print(f"replay divergence: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except WeatherTGDError as exc:
        cause = exc.__cause__
        stream = sys.stderr
        if isinstance(cause, ValidationError):
            print(f"error: {exc}", file=stream)
            return EXIT_VALIDATION
        print(f"error: {exc}", file=stream)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
