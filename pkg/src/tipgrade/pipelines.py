"""The five grading pipelines and the resumable batch runner."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

from .client import ChatRequest, ClientBackend, ContextLengthError, LLMError, SamplingParams
from .dataset import Dataset, QuestionItem, StudentAnswer
from .parsing import ParseFailure, parse_additive, parse_judgelm, parse_rubric, parse_scored
from .prompts import (
    GENERIC_RUBRIC,
    DEFAULT_COUNTER,
    PromptError,
    PromptPair,
    RubricOrigin,
    RubricText,
    TokenBudget,
    check_budget,
    render_adaptive_evaluation,
    render_additive,
    render_criteria_generation,
    render_judgelm,
    render_no_reference,
    render_reference_aided,
    template_versions,
)

log = logging.getLogger(__name__)

SENTINEL = -1
DEFAULT_RETRY_LIMIT = 2
DEFAULT_CONCURRENCY = 4
ADDITIVE_WEIGHTS = (2, 1, 1)


class Method(str, enum.Enum):
    JUDGELM = "JudgeLM"
    REFERENCE_AIDED = "ReferenceAided"
    NO_REFERENCE = "NoReference"
    ADDITIVE = "Additive"
    ADAPTIVE = "Adaptive"


METHOD_ORDER = tuple(Method)
RUBRIC_METHODS = (Method.REFERENCE_AIDED, Method.NO_REFERENCE, Method.ADAPTIVE)


class Status(str, enum.Enum):
    OK = "ok"
    OVERFLOW = "overflow"
    PARSE_FAILED = "parse_failed"


class Role(str, enum.Enum):
    JUDGELM = "judgelm"
    INSTRUCT = "instruct"


def additive_score(c1: bool, c2: bool, c3: bool) -> int:
    return sum(w for w, flag in zip(ADDITIVE_WEIGHTS, (c1, c2, c3)) if flag)


@dataclass(frozen=True)
class ModelEntry:
    params: SamplingParams
    role: Role = Role.INSTRUCT
    budget: TokenBudget | None = None
    base_url: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "role", Role(self.role))
        if self.budget is None and self.role is Role.JUDGELM:
            object.__setattr__(self, "budget", TokenBudget())

    @property
    def name(self) -> str:
        return self.params.model_name

    def serves(self, method: Method) -> bool:
        return (method is Method.JUDGELM) == (self.role is Role.JUDGELM)

    def to_dict(self) -> dict:
        budget = None
        if self.budget is not None:
            budget = {
                "limit": self.budget.limit,
                "counter_id": self.budget.counter_id,
                "completion_headroom": self.budget.completion_headroom,
            }
        return {"params": self.params.to_dict(), "role": self.role.value, "budget": budget}


@dataclass(frozen=True)
class EvaluationRecord:
    question_id: str
    student_id: str
    method: Method
    model_name: str
    score: int
    explanation: str
    status: Status
    criteria_flags: tuple[bool, bool, bool] | None = None
    reported_score: int | None = None
    score_mismatch: bool | None = None
    rubric_used: RubricText | None = None
    transcript_refs: tuple[str, ...] = ()
    failure: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "method", Method(self.method))
        object.__setattr__(self, "status", Status(self.status))
        object.__setattr__(self, "transcript_refs", tuple(self.transcript_refs))
        if self.criteria_flags is not None:
            object.__setattr__(self, "criteria_flags", tuple(bool(f) for f in self.criteria_flags))
        if (self.score == SENTINEL) != (self.status is not Status.OK):
            raise ValueError(f"score {self.score} inconsistent with status {self.status.value}")
        if self.status is Status.OK and not 0 <= self.score <= 4:
            raise ValueError(f"score {self.score} outside 0-4")
        if self.criteria_flags is not None and self.method is not Method.ADDITIVE:
            raise ValueError("criteria flags only apply to Additive records")
        if self.method is Method.ADDITIVE and self.status is Status.OK:
            if self.criteria_flags is None or self.score != additive_score(*self.criteria_flags):
                raise ValueError("additive score must equal the weighted criteria sum")
        if self.rubric_used is not None and self.method not in RUBRIC_METHODS:
            raise ValueError(f"{self.method.value} records carry no rubric")
        if self.status is Status.OK and self.method in RUBRIC_METHODS and self.rubric_used is None:
            raise ValueError(f"{self.method.value} record needs the rubric it used")

    @property
    def key(self) -> tuple[str, str, str, str]:
        return (self.question_id, self.student_id, self.method.value, self.model_name)

    @property
    def ok(self) -> bool:
        return self.status is Status.OK

    def to_dict(self) -> dict:
        return {
            "kind": "record",
            "question_id": self.question_id,
            "student_id": self.student_id,
            "method": self.method.value,
            "model_name": self.model_name,
            "score": self.score,
            "status": self.status.value,
            "explanation": self.explanation,
            "criteria_flags": list(self.criteria_flags) if self.criteria_flags is not None else None,
            "reported_score": self.reported_score,
            "score_mismatch": self.score_mismatch,
            "rubric_used": self.rubric_used.to_dict() if self.rubric_used is not None else None,
            "transcript_refs": list(self.transcript_refs),
            "failure": self.failure,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "EvaluationRecord":
        rubric = obj.get("rubric_used")
        flags = obj.get("criteria_flags")
        return cls(
            question_id=obj["question_id"],
            student_id=obj["student_id"],
            method=Method(obj["method"]),
            model_name=obj["model_name"],
            score=obj["score"],
            explanation=obj.get("explanation", ""),
            status=Status(obj["status"]),
            criteria_flags=tuple(flags) if flags is not None else None,
            reported_score=obj.get("reported_score"),
            score_mismatch=obj.get("score_mismatch"),
            rubric_used=RubricText.from_dict(rubric) if rubric else None,
            transcript_refs=tuple(obj.get("transcript_refs") or ()),
            failure=obj.get("failure"),
        )


def _sentinel(q, a, method, model_name, status, refs=(), failure=None, rubric=None) -> EvaluationRecord:
    return EvaluationRecord(
        q.question_id, a.student_id, method, model_name, SENTINEL, "", status,
        rubric_used=rubric, transcript_refs=tuple(refs), failure=failure,
    )


@dataclass(frozen=True)
class RunPlan:
    methods: tuple[Method, ...]
    models: tuple[ModelEntry, ...]
    retry_limit: int = DEFAULT_RETRY_LIMIT
    concurrency_limit: int = DEFAULT_CONCURRENCY
    counter_id: str = DEFAULT_COUNTER

    def __post_init__(self) -> None:
        methods = tuple(sorted({Method(m) for m in self.methods}, key=METHOD_ORDER.index))
        object.__setattr__(self, "methods", methods)
        object.__setattr__(self, "models", tuple(self.models))
        if not methods:
            raise ValueError("a run plan needs at least one method")
        if not self.models:
            raise ValueError("a run plan needs at least one model")
        if self.retry_limit < 0:
            raise ValueError("retry_limit must be >= 0")
        if self.concurrency_limit < 1:
            raise ValueError("concurrency_limit must be >= 1")
        for m in methods:
            if not any(e.serves(m) for e in self.models):
                raise ValueError(f"no model entry can serve method {m.value}")

    def cells(self, dataset: Dataset) -> list[tuple[QuestionItem, StudentAnswer, Method, ModelEntry]]:
        """All (answer, method, model) cells, grouped by question."""
        out = []
        for q in dataset.questions:
            for a in dataset.answers_for(q.question_id):
                for method in self.methods:
                    for model in self.models:
                        if model.serves(method):
                            out.append((q, a, method, model))
        return out

    def to_dict(self) -> dict:
        # concurrency_limit is left out on purpose: results must not depend on it
        return {
            "methods": [m.value for m in self.methods],
            "models": [m.to_dict() for m in self.models],
            "retry_limit": self.retry_limit,
            "counter_id": self.counter_id,
        }


class RunStore:
    """JSON-lines run log: one header line with the manifest, then records.

    Records are appended as they finalize so an interrupted run can resume;
    :meth:`compact` rewrites the file in key order once the run ends.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self.manifest: dict | None = None
        self._records: dict[tuple, EvaluationRecord] = {}
        if self.path.exists():
            self._load()

    def _load(self) -> None:
        with self.path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    # a torn final line from a crash is dropped; the cell re-runs
                    log.warning("%s:%d: skipping unreadable line (%s)", self.path, lineno, exc.msg)
                    continue
                if obj.get("kind") == "header":
                    self.manifest = obj.get("manifest")
                elif obj.get("kind") == "record":
                    rec = EvaluationRecord.from_dict(obj)
                    self._records.setdefault(rec.key, rec)
                else:
                    raise ValueError(f"{self.path}:{lineno}: unexpected record kind {obj.get('kind')!r}")

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, key: tuple) -> bool:
        return key in self._records

    def get(self, key: tuple) -> EvaluationRecord | None:
        return self._records.get(key)

    def records(self) -> list[EvaluationRecord]:
        return [self._records[k] for k in sorted(self._records)]

    def finalize(self, rec: EvaluationRecord) -> bool:
        """Append ``rec`` unless its key is already finalized. Returns True when written."""
        with self._lock:
            if rec.key in self._records:
                return False
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")
            self._records[rec.key] = rec
            return True

    def compact(self, manifest: dict | None = None) -> None:
        with self._lock:
            if manifest is not None:
                self.manifest = manifest
            lines = [json.dumps({"kind": "header", "manifest": self.manifest}, ensure_ascii=False, sort_keys=True)]
            lines += [json.dumps(self._records[k].to_dict(), ensure_ascii=False, sort_keys=True) for k in sorted(self._records)]
            self.path.parent.mkdir(parents=True, exist_ok=True)
            tmp = self.path.with_name(self.path.name + ".tmp")
            tmp.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
            os.replace(tmp, self.path)


# -- single-cell evaluators --------------------------------------------------


def _request(prompt: PromptPair, model: ModelEntry) -> ChatRequest:
    return ChatRequest(tuple(prompt.messages()), model.params)


def _sample_until_parsed(prompt, model, client, retry_limit, parser):
    """Call the model up to ``retry_limit + 1`` times until ``parser`` accepts.

    Returns (parsed or None, digests, last failure). ContextLengthError is
    passed through to the caller.
    """
    req = _request(prompt, model)
    digest = req.digest()
    refs: list[str] = []
    failure: ParseFailure | None = None
    for attempt in range(retry_limit + 1):
        completion = client.complete(req, attempt)
        refs.append(digest)
        try:
            return parser(completion.content), refs, None
        except ParseFailure as exc:
            failure = exc
            log.info("parse failure (%s) on attempt %d for %s", exc.stage, attempt + 1, digest[:12])
    return None, refs, failure


def _over_budget(prompt: PromptPair, model: ModelEntry, budget: TokenBudget | None) -> bool:
    budget = budget or model.budget
    return budget is not None and not check_budget(prompt, budget).fits


def evaluate_judgelm(q, a, model: ModelEntry, client: ClientBackend, retry_limit: int = DEFAULT_RETRY_LIMIT,
                     budget: TokenBudget | None = None) -> EvaluationRecord:
    prompt = render_judgelm(q, a)
    if _over_budget(prompt, model, budget):
        return _sentinel(q, a, Method.JUDGELM, model.name, Status.OVERFLOW, failure="token budget exceeded")
    try:
        verdict, refs, failure = _sample_until_parsed(prompt, model, client, retry_limit, parse_judgelm)
    except ContextLengthError as exc:
        return _sentinel(q, a, Method.JUDGELM, model.name, Status.OVERFLOW, failure=str(exc)[:200])
    if verdict is None:
        return _sentinel(q, a, Method.JUDGELM, model.name, Status.PARSE_FAILED, refs, failure.stage)
    return EvaluationRecord(q.question_id, a.student_id, Method.JUDGELM, model.name,
                            verdict.student_score, verdict.explanation, Status.OK, transcript_refs=tuple(refs))


def _evaluate_with_rubric(method, prompt, q, a, rubric, model, client, retry_limit) -> EvaluationRecord:
    if _over_budget(prompt, model, None):
        return _sentinel(q, a, method, model.name, Status.OVERFLOW, failure="token budget exceeded", rubric=rubric)
    try:
        result, refs, failure = _sample_until_parsed(prompt, model, client, retry_limit, parse_scored)
    except ContextLengthError as exc:
        return _sentinel(q, a, method, model.name, Status.OVERFLOW, failure=str(exc)[:200], rubric=rubric)
    if result is None:
        return _sentinel(q, a, method, model.name, Status.PARSE_FAILED, refs, failure.stage, rubric)
    return EvaluationRecord(q.question_id, a.student_id, method, model.name, result.score, result.evaluation,
                            Status.OK, rubric_used=rubric, transcript_refs=tuple(refs),
                            failure="missing_rationale" if result.missing_rationale else None)


def evaluate_scored(method: Method, q, a, rubric: RubricText, model: ModelEntry, client: ClientBackend,
                    retry_limit: int = DEFAULT_RETRY_LIMIT) -> EvaluationRecord:
    method = Method(method)
    if method is Method.REFERENCE_AIDED:
        prompt = render_reference_aided(q, a, rubric)
    elif method is Method.NO_REFERENCE:
        prompt = render_no_reference(q, a, rubric)
    else:
        raise ValueError(f"evaluate_scored handles ReferenceAided and NoReference, not {method.value}")
    return _evaluate_with_rubric(method, prompt, q, a, rubric, model, client, retry_limit)


def evaluate_additive(q, a, model: ModelEntry, client: ClientBackend,
                      retry_limit: int = DEFAULT_RETRY_LIMIT) -> EvaluationRecord:
    prompt = render_additive(q, a)
    if _over_budget(prompt, model, None):
        return _sentinel(q, a, Method.ADDITIVE, model.name, Status.OVERFLOW, failure="token budget exceeded")
    try:
        result, refs, failure = _sample_until_parsed(prompt, model, client, retry_limit, parse_additive)
    except ContextLengthError as exc:
        return _sentinel(q, a, Method.ADDITIVE, model.name, Status.OVERFLOW, failure=str(exc)[:200])
    if result is None:
        return _sentinel(q, a, Method.ADDITIVE, model.name, Status.PARSE_FAILED, refs, failure.stage)
    score = additive_score(*result.flags)
    mismatch = result.reported_score is not None and result.reported_score != score
    return EvaluationRecord(q.question_id, a.student_id, Method.ADDITIVE, model.name, score, result.evaluation,
                            Status.OK, criteria_flags=result.flags, reported_score=result.reported_score,
                            score_mismatch=mismatch, transcript_refs=tuple(refs))


class RubricGenerationError(LLMError):
    def __init__(self, question_id: str, failure: ParseFailure | None):
        stage = failure.stage if failure else "unknown"
        super().__init__(f"criteria generation failed for {question_id}: {stage}")
        self.question_id = question_id
        self.stage = stage


def generate_rubric(q: QuestionItem, model: ModelEntry, client: ClientBackend,
                    retry_limit: int = DEFAULT_RETRY_LIMIT) -> RubricText:
    prompt = render_criteria_generation(q)
    rubric, _, failure = _sample_until_parsed(prompt, model, client, retry_limit, parse_rubric)
    if rubric is None:
        raise RubricGenerationError(q.question_id, failure)
    return RubricText(rubric.tiers, RubricOrigin.GENERATED, f"{q.question_id}@{model.name}")


class RubricCache:
    """One generated rubric per (question, model), shared by all its answers.

    Failures are cached too, so a question whose criteria cannot be parsed
    is not retried for every answer.
    """

    def __init__(self, preloaded: Mapping[tuple[str, str], RubricText] | None = None):
        self._done: dict[tuple[str, str], RubricText | RubricGenerationError] = dict(preloaded or {})
        self._locks: dict[tuple[str, str], threading.Lock] = {}
        self._guard = threading.Lock()
        self.generated = 0

    def get(self, q: QuestionItem, model: ModelEntry, client: ClientBackend, retry_limit: int) -> RubricText:
        key = (q.question_id, model.name)
        with self._guard:
            lock = self._locks.setdefault(key, threading.Lock())
        with lock:
            if key not in self._done:
                try:
                    self._done[key] = generate_rubric(q, model, client, retry_limit)
                except RubricGenerationError as exc:
                    self._done[key] = exc
                self.generated += 1
        result = self._done[key]
        if isinstance(result, RubricGenerationError):
            raise result
        return result

    def items(self) -> dict:
        return dict(self._done)


def evaluate_adaptive(q, a, rubric: RubricText, model: ModelEntry, client: ClientBackend,
                      retry_limit: int = DEFAULT_RETRY_LIMIT) -> EvaluationRecord:
    if rubric.origin is not RubricOrigin.GENERATED:
        raise PromptError("adaptive evaluation requires a generated rubric")
    prompt = render_adaptive_evaluation(q, a, rubric)
    return _evaluate_with_rubric(Method.ADAPTIVE, prompt, q, a, rubric, model, client, retry_limit)


# -- batch runner ------------------------------------------------------------


@dataclass
class RunSummary:
    total: int = 0
    skipped: int = 0
    finalized: int = 0
    ok: int = 0
    overflow: int = 0
    parse_failed: int = 0
    rubrics_generated: int = 0
    failures: list[tuple[tuple, str]] = field(default_factory=list)

    @property
    def done(self) -> int:
        return self.skipped + self.finalized

    @property
    def complete(self) -> bool:
        return not self.failures and self.done == self.total


def _resolve(client, model: ModelEntry) -> ClientBackend:
    if isinstance(client, Mapping):
        return client[model.name]
    return client


def _dataset_digest(dataset: Dataset) -> str:
    from .dataset import dataset_records

    blob = "\n".join(json.dumps(r, sort_keys=True, ensure_ascii=False) for r in dataset_records(dataset))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def build_manifest(dataset: Dataset, plan: RunPlan, extra: Mapping | None = None) -> dict:
    manifest = {
        "format": "tipgrade-run",
        "version": 1,
        "plan": plan.to_dict(),
        "counter_id": plan.counter_id,
        "template_versions": template_versions(),
        "dataset_digest": _dataset_digest(dataset),
    }
    manifest.update(extra or {})
    return manifest


def run_batch(dataset: Dataset, plan: RunPlan, store: RunStore, client,
              rubrics: RubricCache | None = None, manifest_extra: Mapping | None = None,
              on_progress: Callable[[RunSummary], None] | None = None) -> RunSummary:
    """Finalize a record for every (answer, method, model) cell of ``plan``.

    ``client`` is a backend or a mapping from model name to backend. Cells
    already finalized in ``store`` are skipped. Transport errors leave their
    cell unfinalized and are listed in the summary's ``failures``.
    """
    rubrics = rubrics if rubrics is not None else RubricCache()
    cells = plan.cells(dataset)
    summary = RunSummary(total=len(cells))
    pending = []
    for cell in cells:
        q, a, method, model = cell
        if (q.question_id, a.student_id, method.value, model.name) in store:
            summary.skipped += 1
        else:
            pending.append(cell)
    lock = threading.Lock()

    def evaluate(cell) -> EvaluationRecord:
        q, a, method, model = cell
        backend = _resolve(client, model)
        if method is Method.JUDGELM:
            return evaluate_judgelm(q, a, model, backend, plan.retry_limit)
        if method in (Method.REFERENCE_AIDED, Method.NO_REFERENCE):
            return evaluate_scored(method, q, a, GENERIC_RUBRIC, model, backend, plan.retry_limit)
        if method is Method.ADDITIVE:
            return evaluate_additive(q, a, model, backend, plan.retry_limit)
        try:
            rubric = rubrics.get(q, model, backend, plan.retry_limit)
        except RubricGenerationError as exc:
            return _sentinel(q, a, Method.ADAPTIVE, model.name, Status.PARSE_FAILED, failure=f"criteria:{exc.stage}")
        return evaluate_adaptive(q, a, rubric, model, backend, plan.retry_limit)

    def run_cell(cell) -> None:
        q, a, method, model = cell
        key = (q.question_id, a.student_id, method.value, model.name)
        try:
            rec = evaluate(cell)
        except LLMError as exc:
            log.error("cell %s left unfinalized: %s", "/".join(key), exc)
            with lock:
                summary.failures.append((key, str(exc)))
            return
        written = store.finalize(rec)
        with lock:
            if written:
                summary.finalized += 1
                if rec.status is Status.OK:
                    summary.ok += 1
                elif rec.status is Status.OVERFLOW:
                    summary.overflow += 1
                else:
                    summary.parse_failed += 1
            if on_progress:
                on_progress(summary)

    # criteria generation first so no two workers race for the same question
    adaptive = {(q.question_id, m.name): (q, m) for q, _, method, m in pending if method is Method.ADAPTIVE}
    with ThreadPoolExecutor(max_workers=plan.concurrency_limit) as pool:
        def warm(item):
            q, m = item
            try:
                rubrics.get(q, m, _resolve(client, m), plan.retry_limit)
            except RubricGenerationError:
                pass
            except LLMError as exc:
                log.error("criteria generation for %s interrupted: %s", q.question_id, exc)

        list(pool.map(warm, adaptive.values()))
        list(pool.map(run_cell, pending))

    summary.rubrics_generated = rubrics.generated
    store.compact(build_manifest(dataset, plan, manifest_extra))
    return summary


def iter_records(records: Iterable[EvaluationRecord], method: Method | str | None = None,
                 model_name: str | None = None) -> list[EvaluationRecord]:
    out = []
    for r in records:
        if method is not None and r.method is not Method(method):
            continue
        if model_name is not None and r.model_name != model_name:
            continue
        out.append(r)
    return out
