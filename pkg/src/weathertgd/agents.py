"""Tri-specialist agent layer: prompt templates, response segmentation, and
gradient generation.

Three role-specialized agents (statistical analyst, physics interpreter,
meteorology expert) each critique the current caption against the serialized
series; their responses are segmented into sentence-level fragments, the unit
at which consensus and uniqueness are decided downstream. Templates are plain
UTF-8 text assets with ``{placeholder}`` substitution, one file per
(role, purpose), editable without touching code.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path

from .backend import Backend, CompletionRequest, count_tokens
from .embed import EmbeddingVector
from .errors import EmptyCaption, EmptyGradient, TemplateError

ROLES = ("stat", "phys", "met")

ROLE_TITLES = {
    "stat": "Statistical Analyst",
    "phys": "Physics Interpreter",
    "met": "Meteorology Expert",
}

PLACEHOLDERS = frozenset(
    {"series_table", "summary", "caption", "consensus", "unique", "gradient", "limit_tokens"}
)

_PLACEHOLDER_RE = re.compile(r"\{(" + "|".join(sorted(PLACEHOLDERS)) + r")\}")

MIN_FRAGMENT_TOKENS = 3

DEFAULT_TEMPLATES_DIR = Path(__file__).parent / "templates"


@dataclass(frozen=True)
class PromptTemplate:
    """System/user prompt pair with named ``{placeholder}`` slots."""

    name: str
    system_text: str
    user_text: str
    sha256: str

    def render(self, **bindings: object) -> tuple[str, str]:
        def substitute(text: str) -> str:
            def repl(match: re.Match) -> str:
                key = match.group(1)
                if key not in bindings:
                    raise TemplateError(
                        f"template {self.name!r}: unbound placeholder {{{key}}}"
                    )
                return str(bindings[key])

            return _PLACEHOLDER_RE.sub(repl, text)

        return substitute(self.system_text), substitute(self.user_text)


class TemplateLibrary:
    """Loads and caches ``<name>.txt`` templates from a directory.

    File format: a ``SYSTEM:`` line, system text, a ``USER:`` line, user text.
    """

    def __init__(self, directory: str | Path | None = None):
        self.directory = Path(directory) if directory else DEFAULT_TEMPLATES_DIR
        self._cache: dict[str, PromptTemplate] = {}

    def get(self, name: str) -> PromptTemplate:
        if name not in self._cache:
            self._cache[name] = self._load(name)
        return self._cache[name]

    def _load(self, name: str) -> PromptTemplate:
        path = self.directory / f"{name}.txt"
        try:
            raw = path.read_bytes()
        except OSError as exc:
            raise TemplateError(f"cannot read template {path}: {exc}") from exc
        text = raw.decode("utf-8")
        lines = text.splitlines()
        if not lines or lines[0].strip() != "SYSTEM:":
            raise TemplateError(f"template {path} must start with a SYSTEM: line")
        try:
            user_at = next(i for i, line in enumerate(lines) if line.strip() == "USER:")
        except StopIteration:
            raise TemplateError(f"template {path} has no USER: line") from None
        system_text = "\n".join(lines[1:user_at]).strip()
        user_text = "\n".join(lines[user_at + 1 :]).strip()
        if not system_text or not user_text:
            raise TemplateError(f"template {path} has an empty SYSTEM or USER section")
        return PromptTemplate(
            name=name,
            system_text=system_text,
            user_text=user_text,
            sha256=hashlib.sha256(raw).hexdigest(),
        )

    def hashes(self, names: list[str]) -> dict[str, str]:
        return {name: self.get(name).sha256 for name in sorted(names)}


@dataclass
class Fragment:
    """Sentence-level unit of an agent gradient; embedding attached lazily."""

    text: str
    source_role: str
    ordinal: int
    embedding: EmbeddingVector | None = None


@dataclass
class TextGradient:
    """One agent's natural-language feedback, segmented into fragments."""

    role: str
    raw_text: str
    fragments: list[Fragment]
    iteration: int


@dataclass(frozen=True)
class Caption:
    """The optimization variable: caption text with token accounting."""

    text: str
    token_count: int
    iteration: int

    @classmethod
    def from_text(cls, text: str, iteration: int) -> "Caption":
        return cls(text=text, token_count=count_tokens(text), iteration=iteration)


# Split after ., !, ?, ; only when followed by whitespace or end of text, so
# decimal points inside numbers never split. Newline runs always split.
_SENTENCE_SPLIT_RE = re.compile(r"(?<=[.!?;])(?=\s|$)")
_NEWLINE_RUN_RE = re.compile(r"\n+")


def fragment_split(raw: str) -> list[str]:
    """Segment raw gradient text into fragment strings.

    Fragments are contiguous substrings of the input (trimmed), preserving
    order; pieces with fewer than three whitespace tokens are dropped as
    noise.
    """
    fragments = []
    for chunk in _NEWLINE_RUN_RE.split(raw):
        for piece in _SENTENCE_SPLIT_RE.split(chunk):
            piece = piece.strip()
            if len(piece.split()) >= MIN_FRAGMENT_TOKENS:
                fragments.append(piece)
    return fragments


@dataclass
class AgentLayer:
    """Builds role prompts, invokes the backend, and segments responses."""

    backend: Backend
    templates: TemplateLibrary
    model: str
    role_models: dict[str, str] = field(default_factory=dict)
    temperature: float = 0.2
    max_tokens: int = 2048

    def _model_for(self, role: str) -> str:
        return self.role_models.get(role, self.model)

    def _request(self, role: str, template_name: str, **bindings: object) -> CompletionRequest:
        system_text, user_text = self.templates.get(template_name).render(**bindings)
        return CompletionRequest(
            model=self._model_for(role),
            system_prompt=system_text,
            user_prompt=user_text,
            temperature=self.temperature,
            max_tokens=self.max_tokens,
        )

    def generate_gradient(
        self,
        role: str,
        series_table: str,
        summary_text: str,
        caption: Caption,
        iteration: int,
    ) -> TextGradient:
        """One agent's textual gradient for the current caption."""
        if role not in ROLES:
            raise ValueError(f"unknown agent role {role!r}")
        request = self._request(
            role,
            f"gradient_{role}",
            series_table=series_table,
            summary=summary_text,
            caption=caption.text,
        )
        response = self.backend.complete(request, role=role, iteration=iteration)
        texts = fragment_split(response.text)
        if not texts:
            raise EmptyGradient(f"{role} gradient at iteration {iteration} has no valid fragments")
        fragments = [Fragment(text=t, source_role=role, ordinal=i) for i, t in enumerate(texts)]
        return TextGradient(role=role, raw_text=response.text, fragments=fragments, iteration=iteration)

    def initial_caption(
        self,
        series_table: str,
        summary_text: str,
        limit_tokens: int,
        seed_role: str = "stat",
    ) -> Caption:
        """Seed caption from one agent (default: the statistical analyst)."""
        if seed_role not in ROLES:
            raise ValueError(f"unknown seed role {seed_role!r}")
        request = self._request(
            seed_role,
            f"seed_{seed_role}",
            series_table=series_table,
            summary=summary_text,
            limit_tokens=limit_tokens,
        )
        response = self.backend.complete(request, role="seed", iteration=0)
        text = response.text.strip()
        if not text:
            raise EmptyCaption("seed caption response was empty")
        return Caption.from_text(text, iteration=0)
