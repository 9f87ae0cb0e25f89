"""Turn raw model completions into typed verdicts.

Every parser raises :class:`ParseFailure` instead of returning a partial
result. Scores are never clamped into range.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

from .prompts import RubricOrigin, RubricText

THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"
EXCERPT_LIMIT = 2000

NO_STRUCTURE = "no_structure_found"
BAD_FIELD = "bad_field"
OUT_OF_RANGE = "out_of_range"
EMPTY_COMPLETION = "empty_completion"


class ParseFailure(ValueError):
    def __init__(self, stage: str, message: str, raw: str = ""):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.raw_excerpt = raw[:EXCERPT_LIMIT]


@dataclass(frozen=True)
class ScoredEvaluation:
    score: int
    evaluation: str
    missing_rationale: bool = False


@dataclass(frozen=True)
class AdditiveEvaluation:
    c1: bool
    c2: bool
    c3: bool
    reported_score: int | None
    evaluation: str

    @property
    def flags(self) -> tuple[bool, bool, bool]:
        return (self.c1, self.c2, self.c3)


@dataclass(frozen=True)
class JudgeLMVerdict:
    student_score: int
    explanation: str
    reference_score: int = 4


def _strip_once(text: str, open_marker: str, close_marker: str) -> str:
    out: list[str] = []
    pos = 0
    while True:
        o = text.find(open_marker, pos)
        c = text.find(close_marker, pos)
        if c != -1 and (o == -1 or c < o):
            # close marker with no opener: the template pre-opened the block,
            # so everything before it is reasoning
            out.clear()
            pos = c + len(close_marker)
            continue
        if o == -1:
            out.append(text[pos:])
            break
        out.append(text[pos:o])
        end = text.find(close_marker, o + len(open_marker))
        if end == -1:
            break
        pos = end + len(close_marker)
    return "".join(out)


def strip_reasoning(raw: str, open_marker: str = THINK_OPEN, close_marker: str = THINK_CLOSE) -> str:
    """Remove reasoning blocks delimited by the given markers.

    An unclosed opener swallows the rest of the text.
    """
    text = raw
    while open_marker in text or close_marker in text:
        stripped = _strip_once(text, open_marker, close_marker)
        if stripped == text:
            break
        text = stripped
    return text


def find_structure(text: str) -> tuple[int, int]:
    """Span of the first balanced ``{...}`` object, honouring JSON string quoting."""
    start = text.find("{")
    while start != -1:
        depth = 0
        in_str = False
        escaped = False
        for i in range(start, len(text)):
            ch = text[i]
            if in_str:
                if escaped:
                    escaped = False
                elif ch == "\\":
                    escaped = True
                elif ch == '"':
                    in_str = False
            elif ch == '"':
                in_str = True
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    return start, i + 1
        start = text.find("{", start + 1)
    raise ParseFailure(NO_STRUCTURE, "no balanced braced object", text)


def extract_structure(text: str) -> str:
    start, end = find_structure(text)
    return text[start:end]


# Lenient field patterns for objects that are not valid JSON, such as the
# comma-less layout the response-format block itself shows.
_FIELD_PATTERNS = {
    "number": r'"?{name}"?\s*:\s*"?(-?\d+(?:\.\d+)?)"?',
    "bool": r'"?{name}"?\s*:\s*"?(true|false|yes|no)"?',
    "string": r'"?{name}"?\s*:\s*"((?:[^"\\]|\\.)*)"',
}


def _lenient_fields(span: str, fields: dict[str, str]) -> dict:
    found = {}
    for name, kind in fields.items():
        m = re.search(_FIELD_PATTERNS[kind].format(name=re.escape(name)), span, re.IGNORECASE | re.DOTALL)
        if not m:
            continue
        value = m.group(1)
        if kind == "string":
            try:
                value = json.loads(f'"{value}"')
            except json.JSONDecodeError:
                pass
        found[name] = value
    return found


def _load_object(span: str, fields: dict[str, str]) -> dict:
    try:
        obj = json.loads(span)
    except json.JSONDecodeError:
        return _lenient_fields(span, fields)
    if not isinstance(obj, dict):
        return _lenient_fields(span, fields)
    return {k.lower(): v for k, v in obj.items()}


def _coerce_int(value, raw: str, name: str) -> int:
    if isinstance(value, bool):
        raise ParseFailure(BAD_FIELD, f"{name} is a boolean", raw)
    if isinstance(value, str):
        try:
            value = float(value.strip())
        except ValueError:
            raise ParseFailure(BAD_FIELD, f"{name} is not numeric: {value!r}", raw) from None
    if isinstance(value, float):
        if not value.is_integer():
            raise ParseFailure(BAD_FIELD, f"{name} is not integer-valued: {value}", raw)
        value = int(value)
    if not isinstance(value, int):
        raise ParseFailure(BAD_FIELD, f"{name} has type {type(value).__name__}", raw)
    return value


def _coerce_bool(value, raw: str, name: str) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str):
        v = value.strip().lower()
        if v in ("true", "yes"):
            return True
        if v in ("false", "no"):
            return False
    raise ParseFailure(BAD_FIELD, f"{name} is not a boolean: {value!r}", raw)


def _prepare(raw: str) -> tuple[str, str]:
    text = strip_reasoning(raw)
    if not text.strip():
        raise ParseFailure(EMPTY_COMPLETION, "completion is empty", raw)
    return text, extract_structure(text)


def parse_scored(raw: str) -> ScoredEvaluation:
    _, span = _prepare(raw)
    obj = _load_object(span, {"score": "number", "evaluation": "string"})
    if "score" not in obj or obj["score"] is None:
        raise ParseFailure(BAD_FIELD, "missing score", raw)
    score = _coerce_int(obj["score"], raw, "score")
    if not 0 <= score <= 4:
        raise ParseFailure(OUT_OF_RANGE, f"score {score} outside 0-4", raw)
    evaluation = obj.get("evaluation")
    if evaluation is None:
        return ScoredEvaluation(score, "", missing_rationale=True)
    evaluation = evaluation if isinstance(evaluation, str) else json.dumps(evaluation, ensure_ascii=False)
    return ScoredEvaluation(score, evaluation, missing_rationale=not evaluation.strip())


def parse_additive(raw: str) -> AdditiveEvaluation:
    _, span = _prepare(raw)
    fields = {"c1": "bool", "c2": "bool", "c3": "bool", "score": "number", "evaluation": "string"}
    obj = _load_object(span, fields)
    flags = []
    for name in ("c1", "c2", "c3"):
        if name not in obj:
            raise ParseFailure(BAD_FIELD, f"missing criterion {name}", raw)
        flags.append(_coerce_bool(obj[name], raw, name))
    reported = obj.get("score")
    reported = None if reported is None else _coerce_int(reported, raw, "score")
    evaluation = obj.get("evaluation") or ""
    if not isinstance(evaluation, str):
        evaluation = json.dumps(evaluation, ensure_ascii=False)
    return AdditiveEvaluation(flags[0], flags[1], flags[2], reported, evaluation)


_INT_RE = re.compile(r"-?\d+")


def parse_judgelm(completion: str) -> JudgeLMVerdict:
    """Parse the continuation that follows the pre-filled reference score.

    The first integer is the student's score; whatever follows its line is
    the explanation.
    """
    if not completion.strip():
        raise ParseFailure(EMPTY_COMPLETION, "completion is empty", completion)
    m = _INT_RE.search(completion)
    if not m:
        raise ParseFailure(NO_STRUCTURE, "no score in completion", completion)
    score = int(m.group())
    if not 0 <= score <= 4:
        raise ParseFailure(OUT_OF_RANGE, f"score {score} outside 0-4", completion)
    newline = completion.find("\n", m.end())
    explanation = "" if newline == -1 else completion[newline + 1 :].strip()
    return JudgeLMVerdict(score, explanation)


_TIER_RE = re.compile(r"^[ \t]*(?:\*\*)?([0-4])\.(?:\*\*)?[ \t]+(.*\S)[ \t]*$", re.MULTILINE)


def parse_rubric(raw: str) -> RubricText:
    text = strip_reasoning(raw)
    if not text.strip():
        raise ParseFailure(EMPTY_COMPLETION, "completion is empty", raw)
    tiers: dict[int, str] = {}
    for m in _TIER_RE.finditer(text):
        idx = int(m.group(1))
        if idx in tiers:
            raise ParseFailure(BAD_FIELD, f"tier {idx} appears more than once", raw)
        tiers[idx] = m.group(2).strip()
    missing = [i for i in range(5) if i not in tiers]
    if missing:
        raise ParseFailure(BAD_FIELD, "missing tier(s) " + ", ".join(map(str, missing)), raw)
    return RubricText(tuple(tiers[i] for i in range(5)), RubricOrigin.GENERATED)
