"""Fixture builders shared by the test modules."""

from __future__ import annotations

import hashlib
import json
import threading
from collections import Counter
from pathlib import Path

from tipgrade.client import ChatRequest, Completion
from tipgrade.dataset import Dataset, HumanScore, QuestionItem, StudentAnswer, dataset_records, save_dataset
from tipgrade.prompts import GENERIC_RUBRIC, load_template

N_QUESTIONS = 10
N_STUDENTS = 11
N_OVERSIZED = 37
LONG_ANSWER_CHARS = 8000


def qid(i: int) -> str:
    return f"q{i:02d}"


def sid(j: int) -> str:
    return f"s{j:02d}"


def oversized_keys(n: int = N_OVERSIZED) -> set[tuple[str, str]]:
    """The first ``n`` (question, student) cells in row-major order get long answers."""
    keys = [(qid(i), sid(j)) for i in range(1, N_QUESTIONS + 1) for j in range(1, N_STUDENTS + 1)]
    return set(keys[:n])


def full_size_dataset(n_oversized: int = N_OVERSIZED, with_human: bool = True) -> Dataset:
    """10 questions x 11 students; ``n_oversized`` answers are padded past the JudgeLM budget."""
    long_keys = oversized_keys(n_oversized)
    questions = [
        QuestionItem(
            qid(i),
            f"Question {i}: why does concept {i} matter?",
            f"Lesson text for topic {i}. " * 20,
            f"Concept {i} matters because it bounds the cost of the algorithm.",
        )
        for i in range(1, N_QUESTIONS + 1)
    ]
    answers, human = [], []
    for i in range(1, N_QUESTIONS + 1):
        for j in range(1, N_STUDENTS + 1):
            key = (qid(i), sid(j))
            text = f"Student {j} says concept {i} is about efficiency."
            if key in long_keys:
                text = (text + " ") * (LONG_ANSWER_CHARS // len(text) + 1)
            answers.append(StudentAnswer(qid(i), sid(j), text))
            human.append(HumanScore(qid(i), sid(j), (i * 7 + j * 3) % 5, f"human note {i}/{j}"))
    return Dataset(questions, answers, human if with_human else ())


def write_jsonl(path: Path, rows: list[dict]) -> Path:
    path.write_text("".join(json.dumps(r, ensure_ascii=False) + "\n" for r in rows), encoding="utf-8")
    return path


def write_dataset(path: Path, d: Dataset) -> Path:
    save_dataset(d, path)
    return path


def dataset_rows(d: Dataset) -> list[dict]:
    return dataset_records(d)


def prompt_kind(req: ChatRequest) -> str:
    """Identify which prompt produced ``req`` from its first message."""
    first = req.messages[0][1]
    if req.messages[0][0] == "user" and first.startswith(load_template("judgelm")[:40]):
        return "judgelm"
    if first == load_template("criteria_system"):
        return "criteria"
    if first == load_template("additive_system"):
        return "additive"
    if first.startswith("You are a questionnaire assistant"):
        user = req.messages[-1][1]
        if "[Reference Answer]" not in user:
            return "no_reference"
        fixed = "0. " + GENERIC_RUBRIC.tiers[0]
        return "reference_aided" if fixed in first else "adaptive"
    return "unknown"


def _h(digest: str, salt: str = "") -> int:
    return int(hashlib.sha256((digest + salt).encode()).hexdigest()[:8], 16)


class ScriptedBackend:
    """Deterministic stand-in for a live endpoint.

    Completions depend only on (request digest, attempt), so recording it and
    replaying the store gives identical results. A few cells answer with junk
    on the first attempt to exercise the retry path.
    """

    def __init__(self):
        self.calls = Counter()
        self._lock = threading.Lock()

    def complete(self, req: ChatRequest, attempt: int = 0) -> Completion:
        kind = prompt_kind(req)
        with self._lock:
            self.calls[kind] += 1
        d = req.digest()
        if attempt == 0 and kind != "criteria" and _h(d, "junk") % 13 == 0:
            return Completion("I cannot decide.")
        score = _h(d) % 5
        if kind == "judgelm":
            return Completion(f" {score}\nBoth students answered; the second one scores {score}.")
        if kind == "criteria":
            tiers = "\n".join(f"{i}. Generated tier {i} for this question." for i in range(5))
            return Completion("<think>consider the question</think>\nHere are the criteria:\n" + tiers)
        if kind == "additive":
            c1, c2, c3 = (_h(d, "c1") % 3 == 0), (_h(d, "c2") % 2 == 0), (_h(d, "c3") % 2 == 0)
            reported = _h(d, "rep") % 5
            body = json.dumps({"c1": c1, "c2": c2, "c3": c3, "score": reported, "evaluation": "checked"})
            return Completion(body)
        if kind in ("reference_aided", "no_reference", "adaptive"):
            body = json.dumps({"score": score, "evaluation": f"{kind} rationale"})
            return Completion(f"<think>weighing the answer</think>\n```json\n{body}\n```")
        return Completion("")


class CountingBackend:
    """Wraps a backend and counts requests by prompt kind."""

    def __init__(self, inner):
        self.inner = inner
        self.calls = Counter()
        self._lock = threading.Lock()

    def complete(self, req: ChatRequest, attempt: int = 0) -> Completion:
        with self._lock:
            self.calls[prompt_kind(req)] += 1
        return self.inner.complete(req, attempt)

    @property
    def total(self) -> int:
        return sum(self.calls.values())


class FixedBackend:
    """Returns the same text (or a per-attempt sequence) for every request."""

    def __init__(self, *texts: str):
        self.texts = texts
        self.calls = 0

    def complete(self, req: ChatRequest, attempt: int = 0) -> Completion:
        self.calls += 1
        return Completion(self.texts[min(attempt, len(self.texts) - 1)])
