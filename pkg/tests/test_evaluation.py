"""Judge parsing and the metric kernels: BLEU-4, ROUGE-L, Krippendorff's alpha."""

from __future__ import annotations

import math
import random
from functools import lru_cache

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weathertgd.agents import TemplateLibrary
from weathertgd.backend import Backend, ScriptEntry, ScriptedProvider
from weathertgd.errors import DegenerateTable, EmptyInput, JudgeParseError
from weathertgd.evaluation import (
    AnnotationTable,
    JudgeScore,
    annotation_table_from_csv,
    bleu4,
    format_scores,
    judge,
    krippendorff_alpha,
    parse_judge_response,
    rouge_l,
)

# --- judge --------------------------------------------------------------------

SERIES_TABLE = "timestamp,temperature_c\n2024-03-01T00:00:00+00:00,10.0\n2024-03-01T01:00:00+00:00,12.0"


def _judge_backend(responses: list[str]):
    # consecutive judge calls for the same sample share the (judge, i) key,
    # so feed retries through hash-free FIFO entries keyed on the same prompt
    templates = TemplateLibrary()
    system_text, user_text = templates.get("judge").render(
        series_table=SERIES_TABLE, caption="A caption under test."
    )
    from weathertgd.backend import prompt_sha256

    h = prompt_sha256(system_text, user_text)
    entries = [ScriptEntry(response=r, prompt_sha256=h) for r in responses]
    return Backend(ScriptedProvider(entries)), templates


def test_judge_parses_scripted_scores():
    backend, templates = _judge_backend(["SA: 8.2\nPC: 8.1\nMR: 8.4\nOQ: 8.3"])
    score = judge(backend, templates, "A caption under test.", SERIES_TABLE, model="m")
    assert (score.sa, score.pc, score.mr, score.oq) == (8.2, 8.1, 8.4, 8.3)
    assert score.judge_model == "m"


def test_judge_missing_dimension_retries_then_fails():
    bad = "SA: 8.2\nPC: 8.1\nOQ: 8.3"
    backend, templates = _judge_backend([bad, bad])
    with pytest.raises(JudgeParseError):
        judge(backend, templates, "A caption under test.", SERIES_TABLE, model="m")
    assert len(backend.calls) == 2


def test_judge_retry_recovers():
    good = "SA: 7.0\nPC: 7.5\nMR: 6.5\nOQ: 7.0"
    backend, templates = _judge_backend(["garbled", good])
    score = judge(backend, templates, "A caption under test.", SERIES_TABLE, model="m")
    assert score.oq == 7.0
    assert len(backend.calls) == 2


def test_parse_accepts_surrounding_rubric_prose():
    text = (
        "The caption is quantitatively sound.\n"
        "SA: 9.1\n"
        "Physics is mostly right.\n"
        "PC: 8.0\n"
        "MR: 7.5\n"
        "Overall a solid caption.\n"
        "OQ: 8.2\n"
    )
    assert parse_judge_response(text) == {"sa": 9.1, "pc": 8.0, "mr": 7.5, "oq": 8.2}


def test_parse_rejects_midsentence_mentions():
    text = "I would give SA: 8.2 if pressed, but the MR: 3 aspect is weak."
    assert parse_judge_response(text) is None


def test_parse_rejects_out_of_range_scores():
    assert parse_judge_response("SA: 11\nPC: 8\nMR: 8\nOQ: 8") is None
    assert parse_judge_response("SA: 0.5\nPC: 8\nMR: 8\nOQ: 8") is None


def test_format_parse_round_trip():
    score = JudgeScore(sa=8.2, pc=7.0, mr=9.9, oq=8.0, judge_model="m", raw_response="")
    parsed = parse_judge_response(format_scores(score))
    assert parsed == {"sa": 8.2, "pc": 7.0, "mr": 9.9, "oq": 8.0}


# --- BLEU-4 -------------------------------------------------------------------


def _oracle_bleu(candidate: str, references: list[str]) -> float:
    cand = candidate.lower().split()
    refs = [r.lower().split() for r in references]
    precisions = []
    for n in (1, 2, 3, 4):
        cgrams = [tuple(cand[i : i + n]) for i in range(len(cand) - n + 1)]
        if not cgrams:
            continue
        clipped = 0
        for gram in set(cgrams):
            in_refs = max(
                sum(1 for i in range(len(ref) - n + 1) if tuple(ref[i : i + n]) == gram)
                for ref in refs
            )
            clipped += min(cgrams.count(gram), in_refs)
        p = clipped / len(cgrams)
        precisions.append(p if p > 0 else 1e-9)
    geo = 1.0
    for p in precisions:
        geo *= p ** (1.0 / len(precisions))
    c = len(cand)
    r = min((abs(len(ref) - c), len(ref)) for ref in refs)[1]
    bp = math.exp(1.0 - r / c) if c < r else 1.0
    return bp * geo


def test_bleu_identity_is_exactly_one():
    for text in ("the cat sat on the mat", "single", "two words", "a b c d e f g h"):
        assert bleu4(text, [text]) == 1.0


def test_bleu_disjoint_vocabulary_floored():
    assert bleu4("aa bb cc dd ee", ["xx yy zz ww vv"]) <= 1e-9


def test_bleu_known_pair_matches_oracle():
    candidate = "the cat sat on the mat"
    reference = "the cat sat on a mat"
    assert bleu4(candidate, [reference]) == pytest.approx(
        _oracle_bleu(candidate, [reference]), abs=1e-9
    )


def test_bleu_multiple_references_use_max_clip():
    candidate = "the cat sat"
    refs = ["a dog ran", "the cat sat"]
    assert bleu4(candidate, refs) == 1.0


def test_bleu_reference_order_irrelevant():
    candidate = "rain fell through the night hours"
    refs = ["rain fell overnight in town", "heavy rain fell through the night"]
    assert bleu4(candidate, refs) == bleu4(candidate, list(reversed(refs)))


def test_bleu_brevity_penalty_uses_closest_reference():
    candidate = "one two three"
    # closest reference has length 5 -> BP = exp(1 - 5/3)
    refs = ["one two three four five", "one two three four five six seven eight"]
    got = bleu4(candidate, refs)
    assert got == pytest.approx(_oracle_bleu(candidate, refs), abs=1e-9)


def test_bleu_empty_inputs():
    with pytest.raises(EmptyInput):
        bleu4("", ["ref text"])
    with pytest.raises(EmptyInput):
        bleu4("cand text", [])
    with pytest.raises(EmptyInput):
        bleu4("cand text", ["   "])


_TOKENS = "storm rain wind calm cold warm front ridge peak low".split()


def test_bleu_matches_oracle_on_random_pairs():
    rng = random.Random(21)
    for _ in range(500):
        cand = " ".join(rng.choice(_TOKENS) for _ in range(rng.randint(1, 20)))
        refs = [
            " ".join(rng.choice(_TOKENS) for _ in range(rng.randint(1, 20)))
            for _ in range(rng.randint(1, 3))
        ]
        got = bleu4(cand, refs)
        assert got == pytest.approx(_oracle_bleu(cand, refs), abs=1e-9)
        assert 0.0 <= got <= 1.0


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.sampled_from(_TOKENS), min_size=1, max_size=15),
    st.lists(st.sampled_from(_TOKENS), min_size=1, max_size=15),
)
def test_bleu_bounds_property(cand_tokens, ref_tokens):
    score = bleu4(" ".join(cand_tokens), [" ".join(ref_tokens)])
    assert 0.0 <= score <= 1.0


# --- ROUGE-L ------------------------------------------------------------------


def _oracle_rouge(candidate: str, reference: str):
    cand = tuple(candidate.lower().split())
    ref = tuple(reference.lower().split())

    @lru_cache(maxsize=None)
    def lcs(i: int, j: int) -> int:
        if i == 0 or j == 0:
            return 0
        if cand[i - 1] == ref[j - 1]:
            return lcs(i - 1, j - 1) + 1
        return max(lcs(i - 1, j), lcs(i, j - 1))

    length = lcs(len(cand), len(ref))
    p = length / len(cand)
    r = length / len(ref)
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def test_rouge_identity():
    assert rouge_l("a b c", "a b c") == (1.0, 1.0, 1.0)


def test_rouge_disjoint():
    assert rouge_l("a b c", "x y z") == (0.0, 0.0, 0.0)


def test_rouge_hand_computed_lcs():
    p, r, f1 = rouge_l("a b c d", "a c d e")
    assert (p, r, f1) == (0.75, 0.75, 0.75)


def test_rouge_empty_inputs():
    with pytest.raises(EmptyInput):
        rouge_l("", "ref")
    with pytest.raises(EmptyInput):
        rouge_l("cand", "")


def test_rouge_matches_oracle_on_random_pairs():
    rng = random.Random(33)
    for _ in range(500):
        cand = " ".join(rng.choice(_TOKENS) for _ in range(rng.randint(1, 25)))
        ref = " ".join(rng.choice(_TOKENS) for _ in range(rng.randint(1, 25)))
        got = rouge_l(cand, ref)
        expected = _oracle_rouge(cand, ref)
        for g, e in zip(got, expected):
            assert g == pytest.approx(e, abs=1e-9)
            assert 0.0 <= g <= 1.0


# --- Krippendorff's alpha -----------------------------------------------------


def _oracle_alpha(rows: list[list[float | None]]) -> float:
    units = [[v for v in row if v is not None] for row in rows]
    units = [u for u in units if len(u) >= 2]
    n = sum(len(u) for u in units)
    d_o = 0.0
    for unit in units:
        pairs = sum((a - b) ** 2 for a in unit for b in unit)
        d_o += pairs / (len(unit) - 1)
    d_o /= n
    pooled = [v for u in units for v in u]
    d_e = sum((a - b) ** 2 for a in pooled for b in pooled) / (n * (n - 1))
    if d_e == 0:
        raise ZeroDivisionError
    return 1.0 - d_o / d_e


def test_alpha_perfect_agreement():
    table = AnnotationTable(values=((8.0, 8.0, 8.0), (3.0, 3.0, 3.0), (5.0, 5.0, 5.0)))
    assert krippendorff_alpha(table) == 1.0


def test_alpha_degenerate_table():
    table = AnnotationTable(values=((5.0, 5.0), (5.0, 5.0)))
    with pytest.raises(DegenerateTable):
        krippendorff_alpha(table)
    with pytest.raises(DegenerateTable):
        krippendorff_alpha(AnnotationTable(values=((5.0, None), (None, 4.0))))


def test_alpha_four_item_table_matches_oracle():
    rows = [[1.0, 2.0], [3.0, 3.0], [4.0, 5.0], [2.0, 2.0]]
    table = AnnotationTable(values=tuple(tuple(r) for r in rows))
    assert krippendorff_alpha(table) == pytest.approx(_oracle_alpha(rows), abs=1e-9)


def test_alpha_matches_oracle_on_random_tables():
    rng = random.Random(44)
    for _ in range(200):
        items = rng.randint(1, 8)
        annotators = rng.randint(2, 5)
        rows = [
            [
                round(rng.uniform(1, 10), 1) if rng.random() > 0.2 else None
                for _ in range(annotators)
            ]
            for _ in range(items)
        ]
        table = AnnotationTable(values=tuple(tuple(r) for r in rows))
        try:
            expected = _oracle_alpha(rows)
        except ZeroDivisionError:
            with pytest.raises(DegenerateTable):
                krippendorff_alpha(table)
            continue
        assert krippendorff_alpha(table) == pytest.approx(expected, abs=1e-9)


def test_alpha_invariant_under_reordering():
    rows = [[1.0, 2.0, None], [3.0, 3.0, 4.0], [5.0, 4.0, 5.0], [2.0, None, 2.0]]
    table = AnnotationTable(values=tuple(tuple(r) for r in rows))
    base = krippendorff_alpha(table)
    shuffled_items = AnnotationTable(values=tuple(tuple(r) for r in reversed(rows)))
    assert krippendorff_alpha(shuffled_items) == pytest.approx(base, abs=1e-12)
    shuffled_annotators = AnnotationTable(
        values=tuple(tuple(reversed(r)) for r in rows)
    )
    assert krippendorff_alpha(shuffled_annotators) == pytest.approx(base, abs=1e-12)


def test_alpha_independent_random_scores_near_zero():
    rng = random.Random(55)
    alphas = []
    for _ in range(200):
        scores = list(range(1, 31))
        a = scores.copy()
        b = scores.copy()
        rng.shuffle(a)
        rng.shuffle(b)
        table = AnnotationTable(values=tuple((float(x), float(y)) for x, y in zip(a, b)))
        alphas.append(krippendorff_alpha(table))
    mean = sum(alphas) / len(alphas)
    assert abs(mean) < 0.1


def test_annotation_table_from_csv():
    table = annotation_table_from_csv("8.0,8.5\n7.0,\n6.5,6.0\n")
    assert table.values == ((8.0, 8.5), (7.0, None), (6.5, 6.0))


def test_annotation_table_validation():
    with pytest.raises(ValueError):
        AnnotationTable(values=())
    with pytest.raises(ValueError):
        AnnotationTable(values=((1.0,),))
    with pytest.raises(ValueError):
        AnnotationTable(values=((1.0, 2.0), (1.0,)))
