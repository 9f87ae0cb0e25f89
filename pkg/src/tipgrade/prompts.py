"""Prompt rendering for the five grading methods, plus token budgeting.

Templates live in ``templates/`` as plain text with ``{slot}`` markers.
Substitution is a single literal pass over the known slot names, so a
student answer that happens to contain ``{question}`` is left alone.
"""

from __future__ import annotations

import enum
import hashlib
import math
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Callable

from .dataset import QuestionItem, StudentAnswer

SLOTS = ("context", "question", "reference_answer", "student_answer", "criteria", "reference", "answer")
_SLOT_RE = re.compile(r"\{(" + "|".join(SLOTS) + r")\}")

TEMPLATE_NAMES = (
    "judgelm",
    "reference_aided_system",
    "reference_aided_user",
    "no_reference_system",
    "no_reference_user",
    "additive_system",
    "criteria_system",
    "criteria_user",
    "adaptive_system",
)


class PromptError(ValueError):
    pass


class PromptKind(str, enum.Enum):
    JUDGELM = "JudgeLM"
    REFERENCE_AIDED = "ReferenceAided"
    NO_REFERENCE = "NoReference"
    ADDITIVE = "Additive"
    CRITERIA_GENERATION = "CriteriaGeneration"
    ADAPTIVE_EVALUATION = "AdaptiveEvaluation"


class RubricOrigin(str, enum.Enum):
    FIXED = "fixed"
    GENERATED = "generated"


@dataclass(frozen=True)
class RubricText:
    """Five score tiers, index 0 through 4."""

    tiers: tuple[str, ...]
    origin: RubricOrigin = RubricOrigin.GENERATED
    name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "tiers", tuple(self.tiers))
        object.__setattr__(self, "origin", RubricOrigin(self.origin))
        if len(self.tiers) != 5:
            raise PromptError(f"rubric must have exactly five tiers, got {len(self.tiers)}")
        for i, tier in enumerate(self.tiers):
            if not tier or not tier.strip():
                raise PromptError(f"rubric tier {i} is empty")

    def numbered(self) -> str:
        return "\n".join(f"{i}. {t}" for i, t in enumerate(self.tiers))

    def to_dict(self) -> dict:
        return {"tiers": list(self.tiers), "origin": self.origin.value, "name": self.name}

    @classmethod
    def from_dict(cls, obj: dict) -> "RubricText":
        return cls(tuple(obj["tiers"]), RubricOrigin(obj.get("origin", "generated")), obj.get("name", ""))


GENERIC_RUBRIC = RubricText(
    (
        "The student's answer is nonsensical or unclear. It is not related to the question.",
        "The student's answer shows serious misconceptions or lack of understanding of the concept. "
        "The answer is factually wrong.",
        "The student's answer shows partial understanding of the relevant knowledge. "
        "The answer is not complete or contains wrong information.",
        "The student's answer shows a complete and correct understanding of the concept.",
        "The student's answer shows thorough understanding of the concept that was asked "
        "and offers and nuanced analysis thorough reasoning.",
    ),
    RubricOrigin.FIXED,
    "generic-holistic",
)


@dataclass(frozen=True)
class PromptPair:
    """A rendered prompt.

    JudgeLM prompts are a single block: ``system_text`` is empty and the
    whole prompt sits in ``user_text``.
    """

    system_text: str
    user_text: str
    kind: PromptKind

    def messages(self) -> list[tuple[str, str]]:
        msgs = []
        if self.system_text:
            msgs.append(("system", self.system_text))
        msgs.append(("user", self.user_text))
        return msgs


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    if name not in TEMPLATE_NAMES:
        raise PromptError(f"unknown template {name!r}")
    text = resources.files("tipgrade").joinpath("templates", f"{name}.txt").read_text(encoding="utf-8")
    # asset files carry one trailing newline that is not part of the prompt
    return text[:-1] if text.endswith("\n") else text


def template_versions() -> dict[str, str]:
    """Short content hash of every template asset, for run manifests."""
    return {n: hashlib.sha256(load_template(n).encode("utf-8")).hexdigest()[:16] for n in TEMPLATE_NAMES}


def fill(template: str, **values: str) -> str:
    def sub(m: re.Match) -> str:
        name = m.group(1)
        if name not in values:
            raise PromptError(f"no value supplied for slot {{{name}}}")
        return values[name]

    return _SLOT_RE.sub(sub, template)


def _check_rubric(rubric: RubricText) -> None:
    if not isinstance(rubric, RubricText):
        raise PromptError("rubric must be a RubricText")
    if len(rubric.tiers) != 5:
        raise PromptError("rubric must have exactly five tiers")


def render_judgelm(q: QuestionItem, a: StudentAnswer) -> PromptPair:
    # no lesson context: it does not fit in JudgeLM's window
    text = fill(load_template("judgelm"), question=q.question_text, reference=q.reference_answer, answer=a.answer_text)
    return PromptPair("", text, PromptKind.JUDGELM)


def _reference_user(q: QuestionItem, a: StudentAnswer) -> str:
    return fill(
        load_template("reference_aided_user"),
        context=q.context,
        question=q.question_text,
        reference_answer=q.reference_answer,
        student_answer=a.answer_text,
    )


def _no_reference_user(q: QuestionItem, a: StudentAnswer) -> str:
    return fill(load_template("no_reference_user"), context=q.context, question=q.question_text, student_answer=a.answer_text)


def render_reference_aided(q: QuestionItem, a: StudentAnswer, rubric: RubricText = GENERIC_RUBRIC) -> PromptPair:
    _check_rubric(rubric)
    system = fill(load_template("reference_aided_system"), criteria=rubric.numbered())
    return PromptPair(system, _reference_user(q, a), PromptKind.REFERENCE_AIDED)


def render_no_reference(q: QuestionItem, a: StudentAnswer, rubric: RubricText = GENERIC_RUBRIC) -> PromptPair:
    _check_rubric(rubric)
    system = fill(load_template("no_reference_system"), criteria=rubric.numbered())
    return PromptPair(system, _no_reference_user(q, a), PromptKind.NO_REFERENCE)


def render_additive(q: QuestionItem, a: StudentAnswer) -> PromptPair:
    return PromptPair(load_template("additive_system"), _no_reference_user(q, a), PromptKind.ADDITIVE)


def render_criteria_generation(q: QuestionItem) -> PromptPair:
    user = fill(
        load_template("criteria_user"),
        context=q.context,
        question=q.question_text,
        reference_answer=q.reference_answer,
    )
    return PromptPair(load_template("criteria_system"), user, PromptKind.CRITERIA_GENERATION)


def render_adaptive_evaluation(q: QuestionItem, a: StudentAnswer, rubric: RubricText) -> PromptPair:
    _check_rubric(rubric)
    if rubric.origin is not RubricOrigin.GENERATED:
        raise PromptError("adaptive evaluation requires a generated rubric")
    system = fill(load_template("adaptive_system"), criteria=rubric.numbered())
    return PromptPair(system, _reference_user(q, a), PromptKind.ADAPTIVE_EVALUATION)


# -- token budgeting ---------------------------------------------------------

DEFAULT_COUNTER = "chars-div-4"
DEFAULT_HEADROOM = 256
JUDGELM_TOKEN_LIMIT = 2048


def _chars_div_4(text: str) -> int:
    return math.ceil(len(text) / 4)


_COUNTERS: dict[str, Callable[[str], int]] = {DEFAULT_COUNTER: _chars_div_4}


def register_counter(counter_id: str, fn: Callable[[str], int]) -> None:
    """Make a token counter available under ``counter_id`` (e.g. a real tokenizer)."""
    _COUNTERS[counter_id] = fn


def available_counters() -> list[str]:
    return sorted(_COUNTERS)


@dataclass(frozen=True)
class TokenBudget:
    limit: int = JUDGELM_TOKEN_LIMIT
    counter_id: str = DEFAULT_COUNTER
    completion_headroom: int = DEFAULT_HEADROOM

    def __post_init__(self) -> None:
        if self.limit <= 0:
            raise PromptError("token budget limit must be positive")
        if self.completion_headroom < 0:
            raise PromptError("completion headroom must be non-negative")


@dataclass(frozen=True)
class BudgetCheck:
    tokens: int
    limit: int
    excess: int

    @property
    def fits(self) -> bool:
        return self.excess <= 0


def estimate_tokens(text: str, budget: TokenBudget | None = None) -> int:
    counter_id = budget.counter_id if budget else DEFAULT_COUNTER
    try:
        counter = _COUNTERS[counter_id]
    except KeyError:
        raise PromptError(f"unknown token counter {counter_id!r}") from None
    return counter(text)


def check_budget(p: PromptPair, budget: TokenBudget) -> BudgetCheck:
    """Compare prompt size plus completion headroom against ``budget.limit``.

    Each message is counted separately, as a chat tokenizer would.
    """
    tokens = sum(estimate_tokens(t, budget) for t in (p.system_text, p.user_text) if t)
    needed = tokens + budget.completion_headroom
    return BudgetCheck(tokens, budget.limit, max(0, needed - budget.limit))
