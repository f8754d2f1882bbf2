"""Evaluation harness: LLM-judge scoring, BLEU-4, ROUGE-L, and
Krippendorff's alpha.

The judge receives the raw series table alongside the caption and must emit
one rigid ``KEY: value`` line per dimension (SA, PC, MR, OQ), which keeps
parsing deterministic; free-form rubric text around those lines is fine.
Metric kernels are pure functions over whitespace-lowercase tokenizations.
"""

from __future__ import annotations

import csv
import io
import math
import re
from collections import Counter
from dataclasses import dataclass

from .backend import Backend, CompletionRequest
from .errors import DegenerateTable, EmptyInput, JudgeParseError

JUDGE_DIMENSIONS = ("sa", "pc", "mr", "oq")

_SCORE_LINE_RE = re.compile(r"^\s*(SA|PC|MR|OQ)\s*:\s*([0-9]+(?:\.[0-9])?)\s*$")


@dataclass(frozen=True)
class JudgeScore:
    """Four-dimension 1-10 judge scores for one caption."""

    sa: float
    pc: float
    mr: float
    oq: float
    judge_model: str
    raw_response: str

    def as_dict(self) -> dict:
        return {"sa": self.sa, "pc": self.pc, "mr": self.mr, "oq": self.oq}


def format_scores(score: JudgeScore) -> str:
    """Canonical four-line rendering; ``parse_judge_response`` round-trips it."""
    return (
        f"SA: {score.sa:.1f}\nPC: {score.pc:.1f}\nMR: {score.mr:.1f}\nOQ: {score.oq:.1f}"
    )


def parse_judge_response(text: str) -> dict[str, float] | None:
    """Extract the four scores from rigid ``KEY: value`` lines, or None."""
    found: dict[str, float] = {}
    for line in text.splitlines():
        match = _SCORE_LINE_RE.match(line)
        if not match:
            continue
        key = match.group(1).lower()
        value = float(match.group(2))
        if key not in found and 1.0 <= value <= 10.0:
            found[key] = value
    if set(found) != set(JUDGE_DIMENSIONS):
        return None
    return found


def judge(
    backend: Backend,
    templates,
    caption_text: str,
    series_table: str,
    model: str,
    sample_index: int = 0,
    temperature: float = 0.2,
    max_tokens: int = 2048,
) -> JudgeScore:
    """Score one caption with the judge prompt; one re-ask on parse failure."""
    system_text, user_text = templates.get("judge").render(
        series_table=series_table, caption=caption_text
    )
    request = CompletionRequest(
        model=model,
        system_prompt=system_text,
        user_prompt=user_text,
        temperature=temperature,
        max_tokens=max_tokens,
    )
    last_text = ""
    for _ in range(2):
        response = backend.complete(request, role="judge", iteration=sample_index)
        last_text = response.text
        scores = parse_judge_response(response.text)
        if scores is not None:
            return JudgeScore(
                sa=scores["sa"],
                pc=scores["pc"],
                mr=scores["mr"],
                oq=scores["oq"],
                judge_model=model,
                raw_response=response.text,
            )
    raise JudgeParseError(
        f"judge response missing score lines after retry: {last_text[:200]!r}"
    )


# --- reference-based metrics --------------------------------------------------

_PRECISION_FLOOR = 1e-9


def _tokenize(text: str) -> list[str]:
    return text.lower().split()


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidate: str, references: list[str]) -> float:
    """Sentence-level BLEU-4 with clipped modified precisions.

    Uniform weights over n-gram orders 1..4; zero precisions are floored at
    1e-9 before the geometric mean; the brevity penalty uses the reference
    whose length is closest to the candidate (ties favor the shorter). Orders
    longer than the candidate are skipped so identity always scores 1.0.
    """
    cand = _tokenize(candidate)
    refs = [_tokenize(r) for r in references if r.strip()]
    if not cand or not refs:
        raise EmptyInput("bleu4 requires a non-empty candidate and reference")

    precisions = []
    for n in range(1, 5):
        total = len(cand) - n + 1
        if total < 1:
            continue
        counts = _ngrams(cand, n)
        max_ref: Counter = Counter()
        for ref in refs:
            for gram, count in _ngrams(ref, n).items():
                if count > max_ref[gram]:
                    max_ref[gram] = count
        clipped = sum(min(count, max_ref[gram]) for gram, count in counts.items())
        precision = clipped / total
        precisions.append(precision if precision > 0.0 else _PRECISION_FLOOR)

    if all(p == precisions[0] for p in precisions):
        # geometric mean of identical values is that value; keeping this exact
        # makes identity return 1.0 and the all-floored case return the floor
        score = precisions[0]
    else:
        score = math.exp(sum(math.log(p) for p in precisions) / len(precisions))

    c = len(cand)
    r = min((abs(len(ref) - c), len(ref)) for ref in refs)[1]
    if c < r:
        score *= math.exp(1.0 - r / c)
    return min(1.0, score)


def rouge_l(candidate: str, reference: str) -> tuple[float, float, float]:
    """Token-level longest-common-subsequence precision, recall, and F1."""
    cand = _tokenize(candidate)
    ref = _tokenize(reference)
    if not cand or not ref:
        raise EmptyInput("rouge_l requires non-empty candidate and reference")

    previous = [0] * (len(ref) + 1)
    for token in cand:
        current = [0]
        for j, ref_token in enumerate(ref, start=1):
            if token == ref_token:
                current.append(previous[j - 1] + 1)
            else:
                current.append(max(previous[j], current[j - 1]))
        previous = current
    lcs = previous[-1]

    precision = lcs / len(cand)
    recall = lcs / len(ref)
    if precision + recall == 0.0:
        return 0.0, 0.0, 0.0
    f1 = 2 * precision * recall / (precision + recall)
    return precision, recall, f1


# --- annotator agreement ------------------------------------------------------


@dataclass(frozen=True)
class AnnotationTable:
    """Item-by-annotator score matrix; ``None`` marks a missing rating."""

    values: tuple[tuple[float | None, ...], ...]

    def __post_init__(self):
        if len(self.values) < 1:
            raise ValueError("annotation table needs at least one item")
        widths = {len(row) for row in self.values}
        if len(widths) != 1:
            raise ValueError("annotation table rows must have equal length")
        if widths.pop() < 2:
            raise ValueError("annotation table needs at least two annotators")


def annotation_table_from_csv(content: str) -> AnnotationTable:
    """Rows = items, columns = annotators, empty cell = missing."""
    rows = []
    for raw in csv.reader(io.StringIO(content)):
        if not raw:
            continue
        rows.append(tuple(float(cell) if cell.strip() else None for cell in raw))
    return AnnotationTable(values=tuple(rows))


def krippendorff_alpha(table: AnnotationTable) -> float:
    """Interval-metric Krippendorff's alpha over pairable values.

    alpha = 1 - D_o/D_e with squared-difference distance; only items rated by
    at least two annotators contribute. Raises :class:`DegenerateTable` when
    the pooled values carry no variance (D_e = 0).
    """
    units = [
        [v for v in row if v is not None]
        for row in table.values
    ]
    units = [u for u in units if len(u) >= 2]
    if not units:
        raise DegenerateTable("no item is rated by two or more annotators")

    n = sum(len(u) for u in units)
    pooled = [v for u in units for v in u]

    d_o = 0.0
    for unit in units:
        within = sum(
            (a - b) ** 2 for i, a in enumerate(unit) for b in unit[i + 1 :]
        )
        d_o += 2.0 * within / (len(unit) - 1)
    d_o /= n

    d_e = 0.0
    for i, a in enumerate(pooled):
        for b in pooled[i + 1 :]:
            d_e += 2.0 * (a - b) ** 2
    d_e /= n * (n - 1)

    if d_e == 0.0:
        raise DegenerateTable("pooled values have no variance")
    return 1.0 - d_o / d_e
