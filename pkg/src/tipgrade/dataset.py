"""Question / answer / human-score corpus.

The on-disk format is UTF-8 JSON lines, one entity per line, discriminated
by a ``kind`` field (``question``, ``answer`` or ``human_score``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, NamedTuple

SCORE_MIN = 0
SCORE_MAX = 4

QUESTION_FIELDS = ("question_id", "question_text", "context", "reference_answer")
ANSWER_FIELDS = ("question_id", "student_id", "answer_text")
HUMAN_SCORE_FIELDS = ("question_id", "student_id", "score", "explanation")


class DatasetError(ValueError):
    """Raised when a dataset file cannot be read or breaks an invariant."""


@dataclass(frozen=True)
class QuestionItem:
    question_id: str
    question_text: str
    context: str
    reference_answer: str


@dataclass(frozen=True)
class StudentAnswer:
    question_id: str
    student_id: str
    answer_text: str

    @property
    def key(self) -> tuple[str, str]:
        return (self.question_id, self.student_id)


@dataclass(frozen=True)
class HumanScore:
    question_id: str
    student_id: str
    score: int
    explanation: str = ""

    @property
    def key(self) -> tuple[str, str]:
        return (self.question_id, self.student_id)


@dataclass(frozen=True)
class Violation:
    key: str
    rule: str

    def __str__(self) -> str:
        return f"{self.key}: {self.rule}"


@dataclass(frozen=True)
class Dataset:
    questions: tuple[QuestionItem, ...] = ()
    answers: tuple[StudentAnswer, ...] = ()
    human_scores: tuple[HumanScore, ...] = ()
    _question_index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "questions", tuple(self.questions))
        object.__setattr__(self, "answers", tuple(self.answers))
        object.__setattr__(self, "human_scores", tuple(self.human_scores))
        object.__setattr__(self, "_question_index", {q.question_id: q for q in self.questions})

    def question(self, question_id: str) -> QuestionItem:
        try:
            return self._question_index[question_id]
        except KeyError:
            raise KeyError(f"unknown question_id {question_id!r}") from None

    def answers_for(self, question_id: str) -> list[StudentAnswer]:
        return [a for a in self.answers if a.question_id == question_id]

    def human_score_map(self) -> dict[tuple[str, str], HumanScore]:
        return {h.key: h for h in self.human_scores}


class AttachResult(NamedTuple):
    dataset: Dataset
    attached: int
    replaced: int


def _read_records(path: Path) -> Iterable[tuple[int, dict]]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    # split on \n only: str.splitlines also breaks on U+0085 and U+2028 inside strings
    for lineno, line in enumerate(text.split("\n"), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}:{lineno}: malformed record: {exc.msg}") from exc
        if not isinstance(obj, dict):
            raise DatasetError(f"{path}:{lineno}: malformed record: expected an object")
        yield lineno, obj


def _require(obj: dict, names: tuple[str, ...], where: str) -> dict:
    missing = [n for n in names if n not in obj]
    if missing:
        raise DatasetError(f"{where}: malformed record: missing field(s) {', '.join(missing)}")
    for n in names:
        if n == "score":
            continue
        if not isinstance(obj[n], str):
            raise DatasetError(f"{where}: malformed record: field {n!r} must be a string")
    return {n: obj[n] for n in names}


def _human_score(obj: dict, where: str) -> HumanScore:
    fields = _require(obj, HUMAN_SCORE_FIELDS, where)
    score = fields["score"]
    if isinstance(score, bool) or not isinstance(score, int):
        if isinstance(score, float) and score.is_integer():
            score = int(score)
        else:
            raise DatasetError(f"{where}: malformed record: score must be an integer")
    fields["score"] = score
    return HumanScore(**fields)


def read_dataset(path: str | Path) -> Dataset:
    """Parse a dataset file without checking cross-record invariants."""
    path = Path(path)
    questions, answers, scores = [], [], []
    for lineno, obj in _read_records(path):
        where = f"{path}:{lineno}"
        kind = obj.get("kind")
        if kind == "question":
            questions.append(QuestionItem(**_require(obj, QUESTION_FIELDS, where)))
        elif kind == "answer":
            answers.append(StudentAnswer(**_require(obj, ANSWER_FIELDS, where)))
        elif kind == "human_score":
            scores.append(_human_score(obj, where))
        else:
            raise DatasetError(f"{where}: malformed record: unknown kind {kind!r}")
    return Dataset(questions, answers, scores)


def validate_dataset(d: Dataset) -> list[Violation]:
    """Return every invariant violation in ``d``; an empty list means valid."""
    out: list[Violation] = []
    seen_q: set[str] = set()
    for q in d.questions:
        if q.question_id in seen_q:
            out.append(Violation(q.question_id, "duplicate question_id"))
        seen_q.add(q.question_id)
        for name in ("question_text", "context", "reference_answer"):
            if not getattr(q, name):
                out.append(Violation(q.question_id, f"empty {name}"))

    seen_a: set[tuple[str, str]] = set()
    for a in d.answers:
        label = f"{a.question_id}/{a.student_id}"
        if a.key in seen_a:
            out.append(Violation(label, "duplicate answer key"))
        seen_a.add(a.key)
        if a.question_id not in seen_q:
            out.append(Violation(label, f"dangling question_id {a.question_id}"))

    seen_h: set[tuple[str, str]] = set()
    for h in d.human_scores:
        label = f"{h.question_id}/{h.student_id}"
        if h.key in seen_h:
            out.append(Violation(label, "duplicate human score key"))
        seen_h.add(h.key)
        if not SCORE_MIN <= h.score <= SCORE_MAX:
            out.append(Violation(label, "score out of [0,4]"))
        if h.key not in seen_a:
            out.append(Violation(label, "human score does not resolve to an answer"))
    return out


def load_dataset(path: str | Path) -> Dataset:
    """Read a dataset file, raising DatasetError on any malformed or invalid record."""
    path = Path(path)
    d = read_dataset(path)
    violations = validate_dataset(d)
    if violations:
        raise DatasetError(f"{path}: " + "; ".join(str(v) for v in violations))
    return d


def attach_human_scores(d: Dataset, path: str | Path) -> AttachResult:
    """Merge human-score records from ``path`` into ``d``.

    Scores for keys already present are replaced in place; new keys are
    appended in file order.
    """
    path = Path(path)
    answer_keys = {a.key for a in d.answers}
    incoming: dict[tuple[str, str], HumanScore] = {}
    for lineno, obj in _read_records(path):
        where = f"{path}:{lineno}"
        if obj.get("kind", "human_score") != "human_score":
            raise DatasetError(f"{where}: malformed record: expected kind 'human_score'")
        h = _human_score(obj, where)
        if h.key not in answer_keys:
            raise DatasetError(f"{where}: score key {h.question_id}/{h.student_id} does not resolve to an answer")
        if not SCORE_MIN <= h.score <= SCORE_MAX:
            raise DatasetError(f"{where}: score out of [0,4]")
        incoming[h.key] = h

    replaced = 0
    merged = []
    for h in d.human_scores:
        if h.key in incoming:
            merged.append(incoming.pop(h.key))
            replaced += 1
        else:
            merged.append(h)
    attached = replaced + len(incoming)
    merged.extend(incoming.values())
    return AttachResult(replace(d, human_scores=tuple(merged)), attached, replaced)


def dataset_records(d: Dataset) -> list[dict]:
    rows: list[dict] = []
    for q in d.questions:
        rows.append({"kind": "question", **{n: getattr(q, n) for n in QUESTION_FIELDS}})
    for a in d.answers:
        rows.append({"kind": "answer", **{n: getattr(a, n) for n in ANSWER_FIELDS}})
    for h in d.human_scores:
        rows.append({"kind": "human_score", **{n: getattr(h, n) for n in HUMAN_SCORE_FIELDS}})
    return rows


def save_dataset(d: Dataset, path: str | Path) -> None:
    lines = [json.dumps(r, ensure_ascii=False) for r in dataset_records(d)]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
