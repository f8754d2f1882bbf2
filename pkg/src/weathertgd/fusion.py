"""Consensus-aware gradient fusion.

Fragments from the three agent gradients are compared pairwise by embedding
cosine. Fragments from *different* roles with similarity at or above the
consensus threshold are linked; connected components backed by at least two
roles become consensus groups, each represented by its medoid. Ungrouped
fragments below the uniqueness threshold against every representative are
kept as unique views; the rest are discarded as near-redundant. A fusion
prompt then synthesizes the consensus and unique material into one coherent
textual gradient. Everything is deterministic for a fixed fragment order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .agents import ROLES, Fragment, TextGradient
from .backend import Backend, CompletionRequest, CompletionResponse
from .embed import cosine

RAW_CONCAT_SEPARATOR = "\n\n"

_ROLE_ORDER = {role: i for i, role in enumerate(ROLES)}


@dataclass(frozen=True)
class FusionConfig:
    """Thresholds and ablation switches for gradient fusion."""

    tau_cons: float = 0.8
    tau_unique: float = 0.6
    enabled: bool = True
    unique_integration: bool = True

    def __post_init__(self):
        if not 0.0 < self.tau_cons <= 1.0:
            raise ValueError(f"tau_cons {self.tau_cons} outside (0, 1]")
        if not 0.0 < self.tau_unique <= 1.0:
            raise ValueError(f"tau_unique {self.tau_unique} outside (0, 1]")
        if self.tau_unique > self.tau_cons:
            raise ValueError("tau_unique must not exceed tau_cons")


@dataclass
class FusionResult:
    """Partition of the input fragments plus the synthesized gradient text.

    ``groups`` holds index sets into the input fragment list; consensus,
    unique, and discarded partition the inputs (groups are accounted for by
    their representatives).
    """

    consensus: list[Fragment]
    unique: list[Fragment]
    discarded: list[Fragment]
    fused_text: str
    groups: list[tuple[int, ...]]
    similarities: list[dict] | None = None
    backend_call: CompletionResponse | None = None


def _fragment_sort_key(fragment: Fragment) -> tuple[int, int]:
    return (_ROLE_ORDER[fragment.source_role], fragment.ordinal)


def flatten_gradients(gradients: list[TextGradient]) -> list[Fragment]:
    """All fragments in canonical (role order, ordinal) order."""
    ordered = sorted(gradients, key=lambda g: _ROLE_ORDER[g.role])
    out: list[Fragment] = []
    for gradient in ordered:
        out.extend(gradient.fragments)
    return out


def extract_consensus(
    fragments: list[Fragment], tau_cons: float
) -> tuple[list[tuple[int, ...]], list[Fragment]]:
    """Group cross-role-similar fragments and pick medoid representatives.

    An edge links two fragments iff they come from different roles and their
    cosine is >= ``tau_cons``; groups are connected components with members
    from at least two roles. The representative maximizes mean cosine to the
    rest of its group, ties broken by longer text, then by role order and
    ordinal. Fragments must arrive embedded and in canonical order.
    """
    n = len(fragments)
    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def union(i: int, j: int) -> None:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[rj] = ri

    sims: dict[tuple[int, int], float] = {}
    for i in range(n):
        for j in range(i + 1, n):
            if fragments[i].source_role == fragments[j].source_role:
                continue
            sim = cosine(fragments[i].embedding, fragments[j].embedding)
            sims[(i, j)] = sim
            if sim >= tau_cons:
                union(i, j)

    components: dict[int, list[int]] = {}
    for i in range(n):
        components.setdefault(find(i), []).append(i)

    groups: list[tuple[int, ...]] = []
    representatives: list[Fragment] = []
    for members in sorted(components.values(), key=min):
        roles = {fragments[i].source_role for i in members}
        if len(members) < 2 or len(roles) < 2:
            continue
        groups.append(tuple(sorted(members)))

        def mean_sim(i: int) -> float:
            total = 0.0
            for j in members:
                if j == i:
                    continue
                a, b = (i, j) if i < j else (j, i)
                total += sims.get((a, b), cosine(fragments[i].embedding, fragments[j].embedding))
            return total / (len(members) - 1)

        best = min(
            members,
            key=lambda i: (-mean_sim(i), -len(fragments[i].text), _fragment_sort_key(fragments[i])),
        )
        representatives.append(fragments[best])
    return groups, representatives


def extract_unique(
    fragments: list[Fragment],
    groups: list[tuple[int, ...]],
    representatives: list[Fragment],
    tau_unique: float,
) -> tuple[list[Fragment], list[Fragment]]:
    """Split ungrouped fragments into unique views and near-redundant discards.

    A fragment is unique iff its cosine to *every* consensus representative is
    below ``tau_unique``; with no representatives, all ungrouped fragments are
    unique. Input order is preserved.
    """
    grouped = {i for group in groups for i in group}
    unique: list[Fragment] = []
    discarded: list[Fragment] = []
    for i, fragment in enumerate(fragments):
        if i in grouped:
            continue
        if representatives and any(
            cosine(fragment.embedding, rep.embedding) >= tau_unique
            for rep in representatives
        ):
            discarded.append(fragment)
        else:
            unique.append(fragment)
    return unique, discarded


def _render_fragment_list(fragments: list[Fragment], with_roles: bool) -> str:
    if not fragments:
        return "(none)"
    if with_roles:
        return "\n".join(f"- [{f.source_role}] {f.text}" for f in fragments)
    return "\n".join(f"- {f.text}" for f in fragments)


def fuse_gradients(
    consensus: list[Fragment],
    unique: list[Fragment],
    backend: Backend,
    templates,
    model: str,
    iteration: int,
    temperature: float = 0.2,
    max_tokens: int = 2048,
) -> tuple[str, CompletionResponse | None]:
    """Synthesize the fused gradient text via the fusion prompt.

    With nothing to fuse, returns empty text without a backend call.
    """
    if not consensus and not unique:
        return "", None
    system_text, user_text = templates.get("fusion").render(
        consensus=_render_fragment_list(consensus, with_roles=False),
        unique=_render_fragment_list(unique, with_roles=True),
    )
    request = CompletionRequest(
        model=model,
        system_prompt=system_text,
        user_prompt=user_text,
        temperature=temperature,
        max_tokens=max_tokens,
    )
    response = backend.complete(request, role="fusion", iteration=iteration)
    return response.text, response


def fuse(
    gradients: list[TextGradient],
    config: FusionConfig,
    embedder,
    backend: Backend,
    templates,
    model: str,
    iteration: int,
    temperature: float = 0.2,
    max_tokens: int = 2048,
    trace_similarities: bool = False,
) -> FusionResult:
    """Full fusion stage over one iteration's gradients.

    With fusion disabled (ablation), the raw gradient texts are concatenated
    in role order instead, with no partition and no backend call.
    """
    if not config.enabled:
        ordered = sorted(gradients, key=lambda g: _ROLE_ORDER[g.role])
        fused = RAW_CONCAT_SEPARATOR.join(g.raw_text for g in ordered)
        return FusionResult(
            consensus=[], unique=[], discarded=[], fused_text=fused, groups=[]
        )

    fragments = flatten_gradients(gradients)
    embeddings = embedder.embed_batch([f.text for f in fragments])
    for fragment, embedding in zip(fragments, embeddings):
        fragment.embedding = embedding

    groups, representatives = extract_consensus(fragments, config.tau_cons)
    unique, discarded = extract_unique(fragments, groups, representatives, config.tau_unique)

    similarities = None
    if trace_similarities:
        similarities = []
        for i in range(len(fragments)):
            for j in range(i + 1, len(fragments)):
                if fragments[i].source_role == fragments[j].source_role:
                    continue
                similarities.append(
                    {
                        "i": i,
                        "j": j,
                        "cosine": cosine(fragments[i].embedding, fragments[j].embedding),
                    }
                )

    fused_text, call = fuse_gradients(
        representatives,
        unique if config.unique_integration else [],
        backend,
        templates,
        model,
        iteration,
        temperature,
        max_tokens,
    )
    return FusionResult(
        consensus=representatives,
        unique=unique,
        discarded=discarded,
        fused_text=fused_text,
        groups=groups,
        similarities=similarities,
        backend_call=call,
    )
