"""Score statistics, agreement with human grading, and criterion tables.

Sentinel records (status other than ``ok``) never enter a statistic; they
only show up in the -1 column of score matrices and in exclusion counts.
"""

from __future__ import annotations

import math
import statistics
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .dataset import Dataset, HumanScore
from .pipelines import SENTINEL, EvaluationRecord, Method, additive_score

SCORE_COLUMNS = (-1, 0, 1, 2, 3, 4)
CRITERIA = (("C1", "Correctness"), ("C2", "Clarity"), ("C3", "Well-Explained"))
COMBINATIONS = tuple((c1, c2, c3) for c1 in (False, True) for c2 in (False, True) for c3 in (False, True))

SAMPLE = "sample"
POPULATION = "population"


@dataclass(frozen=True)
class ScoreStats:
    n: int
    mean: float | None = None
    median: float | None = None
    std: float | None = None
    std_convention: str = SAMPLE
    excluded: int = 0


@dataclass(frozen=True)
class AgreementStats:
    n_paired: int
    mad: float | None
    rmse: float | None
    deviations: tuple[tuple[str, str, int], ...] = ()
    excluded_sentinel: int = 0
    excluded_unpaired: int = 0


@dataclass(frozen=True)
class CriterionAnalysis:
    total_answers: int
    counts: tuple[int, int, int]
    percentages: tuple[float, float, float]
    combinations: Mapping[tuple[bool, bool, bool], int]
    inconsistent: int
    n_records: int


@dataclass(frozen=True)
class ScoreMatrix:
    question_ids: tuple[str, ...]
    cells: Mapping[str, Mapping[int, int]]
    histogram: Mapping[int, int] = field(default_factory=dict)

    def count(self, question_id: str, score: int) -> int:
        return self.cells[question_id][score]

    def row_sum(self, question_id: str) -> int:
        return sum(self.cells[question_id].values())

    def long_rows(self) -> list[tuple[str, int, int]]:
        return [(qid, s, self.cells[qid][s]) for qid in self.question_ids for s in SCORE_COLUMNS]


def score_statistics(records_or_scores: Iterable, std: str = SAMPLE) -> ScoreStats:
    """N, mean, median and standard deviation over ok scores.

    Accepts EvaluationRecords or plain integer scores (``-1`` counts as a
    sentinel). ``std`` is ``"sample"`` (n-1) or ``"population"`` (n).
    """
    if std not in (SAMPLE, POPULATION):
        raise ValueError(f"unknown std convention {std!r}")
    scores: list[int] = []
    excluded = 0
    for item in records_or_scores:
        if isinstance(item, EvaluationRecord):
            if item.ok:
                scores.append(item.score)
            else:
                excluded += 1
        elif item == SENTINEL:
            excluded += 1
        else:
            scores.append(item)
    n = len(scores)
    if n == 0:
        return ScoreStats(0, std_convention=std, excluded=excluded)
    if std == POPULATION:
        spread = statistics.pstdev(scores)
    else:
        spread = statistics.stdev(scores) if n > 1 else None
    return ScoreStats(n, statistics.fmean(scores), float(statistics.median(scores)), spread, std, excluded)


def human_statistics(human_scores: Iterable[HumanScore], std: str = SAMPLE) -> ScoreStats:
    return score_statistics([h.score for h in human_scores], std)


def deviation_metrics(deviations: Iterable[float]) -> tuple[float | None, float | None]:
    """(mean absolute deviation, root mean square deviation)."""
    devs = list(deviations)
    if not devs:
        return None, None
    n = len(devs)
    mad = math.fsum(abs(d) for d in devs) / n
    rmse = math.sqrt(math.fsum(d * d for d in devs) / n)
    return mad, rmse


def agreement(records: Iterable[EvaluationRecord], human_scores: Iterable[HumanScore] | Mapping) -> AgreementStats:
    """Model-minus-human deviations over answers having both an ok record and a human score."""
    if isinstance(human_scores, Mapping):
        human = dict(human_scores)
    else:
        human = {h.key: h for h in human_scores}
    deviations = []
    sentinel = unpaired = 0
    for r in sorted(records, key=lambda r: r.key):
        if not r.ok:
            sentinel += 1
            continue
        h = human.get((r.question_id, r.student_id))
        if h is None:
            unpaired += 1
            continue
        deviations.append((r.question_id, r.student_id, r.score - h.score))
    mad, rmse = deviation_metrics(d for _, _, d in deviations)
    return AgreementStats(len(deviations), mad, rmse, tuple(deviations), sentinel, unpaired)


def criterion_analysis(records: Iterable[EvaluationRecord], total_answers: int) -> CriterionAnalysis:
    """Per-criterion and per-combination counts over ok Additive records.

    Percentages use ``total_answers`` as denominator, not the record count.
    """
    counts = [0, 0, 0]
    combos = Counter({c: 0 for c in COMBINATIONS})
    inconsistent = 0
    n = 0
    for r in records:
        if r.method is not Method.ADDITIVE:
            raise ValueError(f"criterion analysis needs Additive records, got {r.method.value}")
        if not r.ok:
            continue
        n += 1
        flags = r.criteria_flags
        for i, flag in enumerate(flags):
            counts[i] += flag
        combos[flags] += 1
        if r.reported_score is not None and r.reported_score != additive_score(*flags):
            inconsistent += 1
    pct = tuple(round(100 * c / total_answers, 2) if total_answers else 0.0 for c in counts)
    return CriterionAnalysis(total_answers, tuple(counts), pct, dict(combos), inconsistent, n)


def score_matrix(records: Iterable[EvaluationRecord], dataset: Dataset) -> ScoreMatrix:
    qids = tuple(q.question_id for q in dataset.questions)
    cells = {qid: {s: 0 for s in SCORE_COLUMNS} for qid in qids}
    for r in records:
        if r.question_id not in cells:
            raise KeyError(f"record references unknown question {r.question_id!r}")
        cells[r.question_id][r.score] += 1
    histogram = {s: sum(cells[q][s] for q in qids) for s in SCORE_COLUMNS}
    return ScoreMatrix(qids, cells, histogram)


def human_score_matrix(dataset: Dataset) -> ScoreMatrix:
    qids = tuple(q.question_id for q in dataset.questions)
    cells = {qid: {s: 0 for s in SCORE_COLUMNS} for qid in qids}
    for h in dataset.human_scores:
        cells[h.question_id][h.score] += 1
    return ScoreMatrix(qids, cells, {s: sum(cells[q][s] for q in qids) for s in SCORE_COLUMNS})
