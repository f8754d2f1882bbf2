"""LLM completion backends: remote chat-completions client, scripted provider,
retry policy, and an on-disk response cache.

The remote wire protocol is a JSON POST of ``{model, messages, temperature,
max_tokens}`` with ``system``/``user`` messages; the response carries the
generated text under ``choices[0].message.content`` plus ``usage`` counts.
The scripted provider replays canned responses keyed by (role, iteration) or
by prompt hash, which keeps every pipeline test fully deterministic and
offline. Every call made through :class:`Backend` is recorded in a
thread-safe log so run traces can account for each call exactly once.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import requests

from .errors import (
    AuthError,
    BackendError,
    ExhaustedRetries,
    MalformedInput,
    ProviderError,
    RateLimited,
    ScriptMiss,
    Timeout,
)

logger = logging.getLogger(__name__)

API_KEY_ENV = "WEATHERTGD_API_KEY"

DEFAULT_TEMPERATURE = 0.2
DEFAULT_MAX_TOKENS = 2048

_RETRYABLE = (RateLimited, Timeout, ProviderError)


def count_tokens(text: str) -> int:
    """Whitespace-delimited token count; the unit of every length budget."""
    return len(text.split())


def prompt_sha256(system_prompt: str, user_prompt: str) -> str:
    h = hashlib.sha256()
    h.update(system_prompt.encode("utf-8"))
    h.update(b"\x00")
    h.update(user_prompt.encode("utf-8"))
    return h.hexdigest()


@dataclass(frozen=True)
class CompletionRequest:
    model: str
    system_prompt: str
    user_prompt: str
    temperature: float = DEFAULT_TEMPERATURE
    max_tokens: int = DEFAULT_MAX_TOKENS

    def __post_init__(self):
        if not self.system_prompt or not self.user_prompt:
            raise ValueError("prompts must be non-empty")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")

    @property
    def prompt_hash(self) -> str:
        return prompt_sha256(self.system_prompt, self.user_prompt)


@dataclass(frozen=True)
class CompletionResponse:
    text: str
    prompt_tokens: int
    completion_tokens: int
    provider: str  # remote | scripted | cache
    latency_ms: int

    def to_dict(self) -> dict:
        return {
            "text": self.text,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "provider": self.provider,
            "latency_ms": self.latency_ms,
        }


@dataclass(frozen=True)
class BackendCall:
    """One completed backend call, as recorded in the call log."""

    role: str | None
    iteration: int | None
    prompt_sha256: str
    response: CompletionResponse


class CompletionProvider(Protocol):
    name: str

    def complete(self, request: CompletionRequest, role: str | None, iteration: int | None) -> CompletionResponse: ...


# --- scripted provider -------------------------------------------------------


@dataclass(frozen=True)
class ScriptEntry:
    """One canned response, keyed by (role, iteration) or by prompt hash."""

    response: str
    role: str | None = None
    iteration: int | None = None
    prompt_sha256: str | None = None

    def __post_init__(self):
        keyed_by_role = self.role is not None and self.iteration is not None
        if not keyed_by_role and self.prompt_sha256 is None:
            raise ValueError("script entry needs (role, iteration) or prompt_sha256")


def load_script(path: str | Path) -> list[ScriptEntry]:
    """Load a JSON script file (list of entry objects); keys must be unique."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedInput(f"cannot load script {path}: {exc}") from exc
    if not isinstance(raw, list):
        raise MalformedInput(f"script {path} must be a JSON list")
    entries = []
    seen: set = set()
    for i, item in enumerate(raw):
        if not isinstance(item, dict) or "response" not in item:
            raise MalformedInput(f"script {path} entry {i}: missing 'response'")
        entry = ScriptEntry(
            response=item["response"],
            role=item.get("role"),
            iteration=item.get("iteration"),
            prompt_sha256=item.get("prompt_sha256"),
        )
        key = (entry.role, entry.iteration, entry.prompt_sha256)
        if key in seen:
            raise MalformedInput(f"script {path} entry {i}: duplicate key {key}")
        seen.add(key)
        entries.append(entry)
    return entries


class ScriptedProvider:
    """Deterministic provider replaying canned responses.

    Lookup order: exact (role, iteration) key first, then prompt-hash match.
    Multiple entries under one prompt hash are consumed FIFO, which replay
    relies on when identical prompts recur across iterations.
    """

    name = "scripted"

    def __init__(self, entries: list[ScriptEntry]):
        self._by_key: dict[tuple[str, int], str] = {}
        self._by_hash: dict[str, deque[str]] = {}
        self._lock = threading.Lock()
        for entry in entries:
            if entry.role is not None and entry.iteration is not None:
                self._by_key[(entry.role, entry.iteration)] = entry.response
            if entry.prompt_sha256 is not None:
                self._by_hash.setdefault(entry.prompt_sha256, deque()).append(entry.response)

    def complete(self, request: CompletionRequest, role: str | None, iteration: int | None) -> CompletionResponse:
        text = None
        with self._lock:
            if role is not None and iteration is not None:
                text = self._by_key.get((role, iteration))
            if text is None:
                queue = self._by_hash.get(request.prompt_hash)
                if queue:
                    text = queue.popleft()
        if text is None:
            raise ScriptMiss(
                f"no script entry for role={role!r} iteration={iteration!r} "
                f"prompt_sha256={request.prompt_hash[:12]}..."
            )
        return CompletionResponse(
            text=text,
            prompt_tokens=count_tokens(request.system_prompt) + count_tokens(request.user_prompt),
            completion_tokens=count_tokens(text),
            provider=self.name,
            latency_ms=0,
        )


# --- remote provider ---------------------------------------------------------


class RemoteProvider:
    """Chat-completions HTTP client for an OpenAI-compatible endpoint."""

    name = "remote"

    def __init__(self, endpoint: str, api_key: str | None = None, timeout_s: float = 60.0):
        self.endpoint = endpoint
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.timeout_s = timeout_s

    def complete(self, request: CompletionRequest, role: str | None = None, iteration: int | None = None) -> CompletionResponse:
        if not self.api_key:
            raise AuthError(f"no API credential; set {API_KEY_ENV} or configure one")
        body = {
            "model": request.model,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_prompt},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        started = time.perf_counter()
        try:
            resp = requests.post(
                self.endpoint,
                json=body,
                headers={"Authorization": f"Bearer {self.api_key}"},
                timeout=self.timeout_s,
            )
        except requests.Timeout as exc:
            raise Timeout(f"request timed out after {self.timeout_s}s") from exc
        except requests.RequestException as exc:
            raise ProviderError(f"request failed: {exc}") from exc
        latency_ms = int((time.perf_counter() - started) * 1000)

        if resp.status_code in (401, 403):
            raise AuthError(f"credential rejected (HTTP {resp.status_code})")
        if resp.status_code == 429:
            raise RateLimited("rate limited (HTTP 429)")
        if resp.status_code >= 500:
            raise ProviderError(f"provider failure (HTTP {resp.status_code})")
        if resp.status_code != 200:
            raise ProviderError(f"unexpected HTTP {resp.status_code}")

        try:
            payload = resp.json()
            text = payload["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"malformed completion payload: {exc}") from exc
        if text is None:
            text = ""
        usage = payload.get("usage") or {}
        return CompletionResponse(
            text=text,
            prompt_tokens=int(
                usage.get(
                    "prompt_tokens",
                    count_tokens(request.system_prompt) + count_tokens(request.user_prompt),
                )
            ),
            completion_tokens=int(usage.get("completion_tokens", count_tokens(text))),
            provider=self.name,
            latency_ms=latency_ms,
        )


# --- on-disk cache -----------------------------------------------------------


class ResponseCache:
    """One JSON file per request key; atomic writes, concurrent reads.

    Key = SHA-256 over the canonical (model, system, user, temperature,
    max_tokens) tuple, so changing any sampling parameter invalidates it.
    Last-writer-wins is safe because identical keys carry identical values.
    """

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(request: CompletionRequest) -> str:
        canonical = json.dumps(
            [
                request.model,
                request.system_prompt,
                request.user_prompt,
                request.temperature,
                request.max_tokens,
            ],
            ensure_ascii=False,
        )
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def get(self, request: CompletionRequest) -> CompletionResponse | None:
        path = self._path(self.key(request))
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            return None
        except (OSError, json.JSONDecodeError):
            logger.warning("unreadable cache entry %s; ignoring", path)
            return None
        return CompletionResponse(
            text=data["text"],
            prompt_tokens=data["prompt_tokens"],
            completion_tokens=data["completion_tokens"],
            provider="cache",
            latency_ms=0,
        )

    def put(self, request: CompletionRequest, response: CompletionResponse) -> None:
        path = self._path(self.key(request))
        fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as f:
                json.dump(response.to_dict(), f, ensure_ascii=False)
            os.replace(tmp, path)
        except OSError:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise


# --- backend: retry + cache + call log ---------------------------------------


@dataclass
class RetryPolicy:
    max_retries: int = 3
    backoff_base_s: float = 1.0
    backoff_factor: float = 2.0


class Backend:
    """Completion gateway combining a provider, retry, cache, and call log.

    Thread-safe: the optimizer issues up to three calls concurrently. Cache
    lookups/writes apply only to the remote provider; scripted responses are
    deterministic already. ``sleep`` is injectable so tests can skip backoff
    delays.
    """

    def __init__(
        self,
        provider: CompletionProvider,
        cache: ResponseCache | None = None,
        retry: RetryPolicy | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.provider = provider
        self.cache = cache if getattr(provider, "name", "") == "remote" else None
        self.retry = retry or RetryPolicy()
        self._sleep = sleep
        self._log: list[BackendCall] = []
        self._log_lock = threading.Lock()

    @property
    def calls(self) -> list[BackendCall]:
        with self._log_lock:
            return list(self._log)

    def drain_calls(self) -> list[BackendCall]:
        with self._log_lock:
            drained = list(self._log)
            self._log.clear()
        return drained

    def _record(self, role: str | None, iteration: int | None, request: CompletionRequest, response: CompletionResponse) -> None:
        call = BackendCall(
            role=role,
            iteration=iteration,
            prompt_sha256=request.prompt_hash,
            response=response,
        )
        with self._log_lock:
            self._log.append(call)

    def complete(
        self,
        request: CompletionRequest,
        role: str | None = None,
        iteration: int | None = None,
    ) -> CompletionResponse:
        if self.cache is not None:
            cached = self.cache.get(request)
            if cached is not None:
                self._record(role, iteration, request, cached)
                return cached

        attempts = self.retry.max_retries + 1
        last_error: BackendError | None = None
        for attempt in range(attempts):
            try:
                response = self.provider.complete(request, role, iteration)
                break
            except _RETRYABLE as exc:
                last_error = exc
                if attempt == attempts - 1:
                    raise ExhaustedRetries(
                        f"gave up after {attempts} attempts: {exc}"
                    ) from exc
                delay = self.retry.backoff_base_s * self.retry.backoff_factor**attempt
                logger.warning(
                    "attempt %d/%d failed (%s); retrying in %.1fs",
                    attempt + 1,
                    attempts,
                    exc,
                    delay,
                )
                self._sleep(delay)
        else:  # pragma: no cover - loop always breaks or raises
            raise ExhaustedRetries(str(last_error))

        if self.cache is not None:
            self.cache.put(request, response)
        self._record(role, iteration, request, response)
        return response
