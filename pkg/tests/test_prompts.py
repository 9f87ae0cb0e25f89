import math
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from tipgrade.dataset import QuestionItem, StudentAnswer
from tipgrade.prompts import (
    GENERIC_RUBRIC,
    SLOTS,
    BudgetCheck,
    PromptError,
    PromptKind,
    PromptPair,
    RubricOrigin,
    RubricText,
    TokenBudget,
    check_budget,
    estimate_tokens,
    register_counter,
    render_adaptive_evaluation,
    render_additive,
    render_criteria_generation,
    render_judgelm,
    render_no_reference,
    render_reference_aided,
)

GOLDEN = Path(__file__).parent / "golden"

Q = QuestionItem("q1", "__QUESTION__", "__CTX__", "__REF__")
A = StudentAnswer("q1", "s1", "__ANSWER__")
GENERATED = RubricText(tuple(f"__TIER{i}__" for i in range(5)), RubricOrigin.GENERATED)


def golden(name: str) -> str:
    text = (GOLDEN / f"{name}.txt").read_text(encoding="utf-8")
    return text[:-1] if text.endswith("\n") else text


def rendered_all():
    return {
        "judgelm": render_judgelm(Q, A),
        "reference_aided": render_reference_aided(Q, A, GENERIC_RUBRIC),
        "no_reference": render_no_reference(Q, A, GENERIC_RUBRIC),
        "additive": render_additive(Q, A),
        "criteria": render_criteria_generation(Q),
        "adaptive": render_adaptive_evaluation(Q, A, GENERATED),
    }


@pytest.mark.parametrize(
    "renderer, system_golden, user_golden",
    [
        ("judgelm", None, "judgelm"),
        ("reference_aided", "reference_aided_system", "reference_aided_user"),
        ("no_reference", "no_reference_system", "no_reference_user"),
        ("additive", "additive_system", "no_reference_user"),
        ("criteria", "criteria_system", "criteria_user"),
        ("adaptive", "adaptive_system", "reference_aided_user"),
    ],
)
def test_golden(renderer, system_golden, user_golden):
    p = rendered_all()[renderer]
    assert p.system_text == (golden(system_golden) if system_golden else "")
    assert p.user_text == golden(user_golden)


def test_judgelm_layout():
    q = QuestionItem("q1", "Q?", "lesson", "R")
    p = render_judgelm(q, StudentAnswer("q1", "s1", "A"))
    assert p.kind is PromptKind.JUDGELM
    assert p.system_text == ""
    assert "[The Start of Student 1's Answer]\nR" in p.user_text
    assert "[The Start of Student 2's Answer]\nA" in p.user_text
    assert p.user_text.endswith("[Response]\n4")
    assert "lesson" not in p.user_text


def test_judgelm_empty_answer():
    p = render_judgelm(Q, StudentAnswer("q1", "s1", ""))
    assert "[The Start of Student 2's Answer]\n\n\n[The End of Student 2's Answer]" in p.user_text


@pytest.mark.parametrize("name", ["judgelm", "reference_aided", "no_reference", "additive", "criteria", "adaptive"])
def test_no_unfilled_slots(name):
    p = rendered_all()[name]
    for slot in SLOTS:
        assert "{" + slot + "}" not in p.system_text + p.user_text


def test_reference_aided_system_and_section_order():
    p = render_reference_aided(Q, A)
    assert "a scale of 0-4" in p.system_text
    assert "nonsensical or unclear" in p.system_text
    heads = ["[Context]", "[Question]", "[Reference Answer]", "[Student Answer]"]
    positions = [p.user_text.index(h) for h in heads]
    assert positions == sorted(positions)


def test_four_tier_rubric_rejected():
    with pytest.raises(PromptError):
        RubricText(("a", "b", "c", "d"))
    with pytest.raises(PromptError):
        RubricText(("a", "b", "", "d", "e"))


def test_no_reference_excludes_reference():
    q = QuestionItem("q1", "Q?", "ctx", "THE REFERENCE ANSWER")
    p = render_no_reference(q, A)
    assert "[Reference Answer]" not in p.user_text
    assert "THE REFERENCE ANSWER" not in p.system_text + p.user_text


def test_no_reference_sections_subsequence_of_reference_aided():
    full = render_reference_aided(Q, A).user_text.split("\n")
    part = render_no_reference(Q, A).user_text.split("\n")
    it = iter(full)
    assert all(line in it for line in part)
    assert part == [ln for ln in full if ln not in ("[Reference Answer]", "__REF__")]


def test_additive():
    p = render_additive(Q, StudentAnswer("q1", "s1", ""))
    assert "[C1] Points: 2" in p.system_text
    assert "2 + 1 = 3" in p.system_text
    for key in ('"c1"', '"c2"', '"c3"', '"score"', '"evaluation"'):
        assert key in p.system_text
    assert p.user_text == render_no_reference(Q, StudentAnswer("q1", "s1", "")).user_text


def test_criteria_generation():
    p = render_criteria_generation(Q)
    assert "Number them 0, 1, 2, 3, and 4." in p.system_text
    assert p.user_text.endswith("[Reference Answer]\n\n__REF__")
    assert "__ANSWER__" not in p.system_text + p.user_text


def test_adaptive():
    p = render_adaptive_evaluation(Q, A, GENERATED)
    for i in range(5):
        assert f"{i}. __TIER{i}__" in p.system_text
    assert p.user_text == render_reference_aided(Q, A).user_text
    with pytest.raises(PromptError):
        render_adaptive_evaluation(Q, A, GENERIC_RUBRIC)


def test_sentinels_appear_once_in_their_section():
    expected = {
        "judgelm": {"__QUESTION__": 1, "__REF__": 1, "__ANSWER__": 1, "__CTX__": 0},
        "reference_aided": {"__QUESTION__": 1, "__REF__": 1, "__ANSWER__": 1, "__CTX__": 1},
        "no_reference": {"__QUESTION__": 1, "__REF__": 0, "__ANSWER__": 1, "__CTX__": 1},
        "additive": {"__QUESTION__": 1, "__REF__": 0, "__ANSWER__": 1, "__CTX__": 1},
        "criteria": {"__QUESTION__": 1, "__REF__": 1, "__ANSWER__": 0, "__CTX__": 1},
        "adaptive": {"__QUESTION__": 1, "__REF__": 1, "__ANSWER__": 1, "__CTX__": 1},
    }
    for name, p in rendered_all().items():
        for sentinel, count in expected[name].items():
            assert p.system_text.count(sentinel) == 0, (name, sentinel)
            assert p.user_text.count(sentinel) == count, (name, sentinel)


def test_slot_text_in_answer_is_not_expanded():
    a = StudentAnswer("q1", "s1", "my answer mentions {question} and {context}")
    p = render_reference_aided(Q, a)
    assert "my answer mentions {question} and {context}" in p.user_text
    assert p.user_text.count("__QUESTION__") == 1


# -- token budget --------------------------------------------------------------


def test_estimate_tokens_examples():
    assert estimate_tokens("") == 0
    assert estimate_tokens("x" * 12000) == 3000
    assert estimate_tokens("abcde") == 2


def test_unknown_counter():
    with pytest.raises(PromptError):
        estimate_tokens("hi", TokenBudget(10, "no-such-counter"))


def test_register_counter():
    register_counter("words", lambda s: len(s.split()))
    assert estimate_tokens("one two three", TokenBudget(10, "words")) == 3


@given(st.text(max_size=200), st.text(max_size=200))
def test_default_counter_monotone(s1, s2):
    assert estimate_tokens(s1 + s2) >= estimate_tokens(s1)
    assert estimate_tokens(s1) == math.ceil(len(s1) / 4)


def test_check_budget_fits_and_overflow():
    assert check_budget(render_judgelm(Q, A), TokenBudget(2048)).fits
    big = PromptPair("", "x" * 10000, PromptKind.JUDGELM)
    verdict = check_budget(big, TokenBudget(2048, completion_headroom=0))
    assert verdict == BudgetCheck(2500, 2048, 452)
    assert not verdict.fits


def test_check_budget_counts_headroom():
    p = PromptPair("", "x" * 4 * 1792, PromptKind.JUDGELM)
    assert check_budget(p, TokenBudget(2048, completion_headroom=256)).fits
    p = PromptPair("", "x" * (4 * 1792 + 1), PromptKind.JUDGELM)
    assert check_budget(p, TokenBudget(2048, completion_headroom=256)).excess == 1


def test_check_budget_deterministic():
    p = render_reference_aided(Q, A)
    b = TokenBudget(500)
    assert check_budget(p, b) == check_budget(p, b)


def test_overflow_fixture_straddles_limit(full_dataset):
    budget = TokenBudget(2048)
    over = [a.key for a in full_dataset.answers
            if not check_budget(render_judgelm(full_dataset.question(a.question_id), a), budget).fits]
    assert len(over) == 37
    from helpers import oversized_keys
    assert set(over) == oversized_keys()


def test_invalid_budget():
    with pytest.raises(PromptError):
        TokenBudget(0)
