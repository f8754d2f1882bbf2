"""The iterative refinement loop: apply fused gradients to the caption,
enforce the token-length constraint, and stop on semantic convergence or the
iteration cap.

One run is: seed caption, then up to ``k_max`` iterations of {three agent
gradients -> consensus/unique fusion -> caption update -> compression guard
-> convergence check}. The three gradient calls may run concurrently; results
are always merged in fixed role order, so traces are identical either way.
"""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import fusion as fusion_mod
from . import series as series_mod
from .agents import ROLES, AgentLayer, Caption, Fragment, TemplateLibrary
from .backend import Backend, BackendCall, CompletionRequest, count_tokens
from .config import RunConfig
from .embed import cosine
from .errors import BackendError, EmptyCaption, RunError, WeatherTGDError
from .trace import (
    STOP_CONVERGED,
    STOP_ERROR,
    STOP_K_MAX,
    RunTrace,
    TraceWriter,
    call_record,
)

logger = logging.getLogger(__name__)

__all__ = [
    "Caption",
    "RunResult",
    "apply_gradient",
    "compress",
    "converged",
    "run",
    "truncate_to_tokens",
]

_SENTENCE_END = ".!?;"

_PURPOSE_ORDER = {
    "seed": 0,
    "gradient:stat": 1,
    "gradient:phys": 2,
    "gradient:met": 3,
    "fusion": 4,
    "update": 5,
    "compress": 6,
}


def _purpose(call: BackendCall) -> str:
    if call.role in ROLES:
        return f"gradient:{call.role}"
    return call.role or "unknown"


def apply_gradient(
    backend: Backend,
    templates: TemplateLibrary,
    caption: Caption,
    fused_text: str,
    intensity: str,
    iteration: int,
    model: str,
    l_max: int,
    temperature: float = 0.2,
    max_tokens: int = 2048,
) -> Caption:
    """Revise the caption according to the fused gradient.

    An empty gradient is a no-op: the input caption is returned unchanged and
    no backend call is made.
    """
    if not fused_text.strip():
        return caption
    system_text, user_text = templates.get(f"update_{intensity}").render(
        caption=caption.text, gradient=fused_text, limit_tokens=l_max
    )
    request = CompletionRequest(
        model=model,
        system_prompt=system_text,
        user_prompt=user_text,
        temperature=temperature,
        max_tokens=max_tokens,
    )
    response = backend.complete(request, role="update", iteration=iteration)
    text = response.text.strip()
    if not text:
        raise EmptyCaption(f"update at iteration {iteration} returned empty text")
    return Caption.from_text(text, iteration=caption.iteration + 1)


def truncate_to_tokens(text: str, l_max: int) -> str:
    """Deterministic truncation to at most ``l_max`` whitespace tokens.

    Cuts at the last sentence boundary within the budget; with no boundary,
    hard-truncates at ``l_max`` tokens. Tokens are rejoined with single
    spaces.
    """
    tokens = text.split()
    if len(tokens) <= l_max:
        return " ".join(tokens)
    prefix = tokens[:l_max]
    boundary = 0
    for i, token in enumerate(prefix, start=1):
        if token[-1] in _SENTENCE_END:
            boundary = i
    kept = prefix[:boundary] if boundary else prefix
    return " ".join(kept)


def compress(
    backend: Backend,
    templates: TemplateLibrary,
    caption: Caption,
    l_max: int,
    iteration: int,
    model: str,
    temperature: float = 0.2,
    max_tokens: int = 2048,
) -> Caption:
    """Shorten an over-limit caption to at most ``l_max`` tokens.

    Tries the compression prompt first; if the model's result still exceeds
    the limit it is deterministically truncated, and on any backend failure
    the original caption is truncated instead, so the bound always holds.
    """
    if caption.token_count <= l_max:
        raise ValueError("compress requires token_count > l_max")
    system_text, user_text = templates.get("compress").render(
        caption=caption.text, limit_tokens=l_max
    )
    request = CompletionRequest(
        model=model,
        system_prompt=system_text,
        user_prompt=user_text,
        temperature=temperature,
        max_tokens=max_tokens,
    )
    try:
        response = backend.complete(request, role="compress", iteration=iteration)
        text = response.text.strip()
    except BackendError as exc:
        logger.warning("compress call failed (%s); truncating deterministically", exc)
        text = ""
    if not text:
        text = caption.text
    if count_tokens(text) > l_max:
        text = truncate_to_tokens(text, l_max)
    return Caption.from_text(text, iteration=caption.iteration)


def converged(embedder, current: Caption, previous: Caption, tau_conv: float) -> tuple[bool, float]:
    """Semantic convergence test: caption-to-caption cosine >= ``tau_conv``."""
    vec_current, vec_previous = embedder.embed_batch([current.text, previous.text])
    similarity = cosine(vec_current, vec_previous)
    return similarity >= tau_conv, similarity


@dataclass
class RunResult:
    caption: Caption
    trace: RunTrace
    trace_path: Path | None


def _fragment_record(fragment: Fragment) -> dict:
    return {"text": fragment.text, "role": fragment.source_role, "ordinal": fragment.ordinal}


def _drain_sorted(backend: Backend) -> list[dict]:
    calls = backend.drain_calls()
    calls.sort(key=lambda c: _PURPOSE_ORDER.get(_purpose(c), 99))
    return [call_record(_purpose(c), c) for c in calls]


def _template_names(config: RunConfig) -> list[str]:
    names = [f"seed_{config.seed_role}", "fusion", "compress"]
    names += [f"gradient_{role}" for role in config.roles]
    names.append(f"update_{config.optimizer.update_intensity}")
    return names


def default_run_id(series_text: str, config_snapshot: dict) -> str:
    import json

    payload = series_text + json.dumps(config_snapshot, sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def run(
    series: series_mod.WeatherSeries,
    config: RunConfig,
    backend: Backend,
    embedder,
    templates: TemplateLibrary,
    run_id: str | None = None,
    trace_dir: str | Path | None = None,
    series_ref: dict | None = None,
) -> RunResult:
    """Execute one full optimization run and record its trace.

    When ``trace_dir`` is given, the trace is streamed to
    ``<run_id>.trace.jsonl`` under it, one flushed line per iteration, so a
    crash leaves a readable partial trace.
    """
    if not config.roles or any(role not in ROLES for role in config.roles):
        raise ValueError(f"invalid agent roles {config.roles!r}")
    roles = tuple(role for role in ROLES if role in config.roles)

    summary = series_mod.summarize(series)
    series_table = series_mod.render_table(series, config.series_max_rows)
    summary_text = series_mod.render_summary(summary)

    if run_id is None:
        run_id = default_run_id(series_table, config.snapshot())

    opt = config.optimizer
    agents = AgentLayer(
        backend=backend,
        templates=templates,
        model=config.backend.model,
        role_models=dict(config.backend.role_models),
        temperature=config.backend.temperature,
        max_tokens=config.backend.max_tokens,
    )

    template_texts = None
    if config.trace.embed_templates:
        template_texts = {
            name: templates.get(name).system_text + "\nUSER:\n" + templates.get(name).user_text
            for name in _template_names(config)
        }
    trace = RunTrace(
        run_id=run_id,
        config=config.snapshot(),
        template_hashes=templates.hashes(_template_names(config)),
        series_ref=series_ref,
        seed=None,
        template_texts=template_texts,
    )
    writer: TraceWriter | None = None
    trace_path: Path | None = None
    if trace_dir is not None:
        trace_path = Path(trace_dir) / f"{run_id}.trace.jsonl"
        writer = TraceWriter(trace_path)
        writer.write_header(
            run_id, trace.config, trace.template_hashes, series_ref, template_texts
        )

    backend.drain_calls()
    seed_role = config.seed_role if config.seed_role in roles else roles[0]
    try:
        caption = agents.initial_caption(
            series_table, summary_text, limit_tokens=opt.l_max, seed_role=seed_role
        )
    except WeatherTGDError as exc:
        if writer is not None:
            writer.close()
        raise RunError(f"seed caption failed: {exc}") from exc

    seed_calls = _drain_sorted(backend)
    trace.seed = {"caption": caption.text, "backend_call": seed_calls[0]}
    if writer is not None:
        writer.write_seed(caption.text, seed_calls[0])

    stop_reason = STOP_K_MAX
    k_bound = 1 if opt.single_pass else opt.k_max
    try:
        for k in range(k_bound):
            if config.concurrent_agents and len(roles) > 1:
                with ThreadPoolExecutor(max_workers=len(roles)) as pool:
                    futures = {
                        role: pool.submit(
                            agents.generate_gradient,
                            role,
                            series_table,
                            summary_text,
                            caption,
                            k,
                        )
                        for role in roles
                    }
                    gradients = [futures[role].result() for role in roles]
            else:
                gradients = [
                    agents.generate_gradient(role, series_table, summary_text, caption, k)
                    for role in roles
                ]

            fusion_result = fusion_mod.fuse(
                gradients,
                config.fusion,
                embedder,
                backend,
                templates,
                model=config.backend.model,
                iteration=k,
                temperature=config.backend.temperature,
                max_tokens=config.backend.max_tokens,
                trace_similarities=config.trace.trace_similarities,
            )

            new_caption = apply_gradient(
                backend,
                templates,
                caption,
                fusion_result.fused_text,
                opt.update_intensity,
                k,
                model=config.backend.model,
                l_max=opt.l_max,
                temperature=config.backend.temperature,
                max_tokens=config.backend.max_tokens,
            )

            compressed = False
            if opt.length_constraint_enabled and new_caption.token_count > opt.l_max:
                new_caption = compress(
                    backend,
                    templates,
                    new_caption,
                    opt.l_max,
                    k,
                    model=config.backend.model,
                    temperature=config.backend.temperature,
                    max_tokens=config.backend.max_tokens,
                )
                compressed = True

            is_converged, similarity = converged(embedder, new_caption, caption, opt.tau_conv)

            record = {
                "iteration": k,
                "gradients": {
                    g.role: {
                        "raw_text": g.raw_text,
                        "fragments": [_fragment_record(f) for f in g.fragments],
                    }
                    for g in gradients
                },
                "groups": [list(group) for group in fusion_result.groups],
                "consensus": [_fragment_record(f) for f in fusion_result.consensus],
                "unique": [_fragment_record(f) for f in fusion_result.unique],
                "discarded": [_fragment_record(f) for f in fusion_result.discarded],
                "fused_text": fusion_result.fused_text,
                "caption_before": caption.text,
                "caption_after": new_caption.text,
                "convergence_similarity": similarity,
                "compressed": compressed,
                "backend_calls": _drain_sorted(backend),
            }
            if fusion_result.similarities is not None:
                record["similarities"] = fusion_result.similarities

            trace.iterations.append(record)
            if writer is not None:
                writer.append_iteration(record)

            caption = new_caption
            if is_converged:
                stop_reason = STOP_CONVERGED
                break
    except WeatherTGDError as exc:
        trace.final_caption = caption.text
        trace.stop_reason = STOP_ERROR
        trace.totals = trace.compute_totals()
        if writer is not None:
            writer.finalize(caption.text, STOP_ERROR, trace.totals)
            writer.close()
        raise RunError(f"iteration {len(trace.iterations)}: {exc}") from exc

    trace.final_caption = caption.text
    trace.stop_reason = stop_reason
    trace.totals = trace.compute_totals()
    if writer is not None:
        writer.finalize(caption.text, stop_reason, trace.totals)
        writer.close()
    return RunResult(caption=caption, trace=trace, trace_path=trace_path)
