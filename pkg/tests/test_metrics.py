import itertools
import math
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import full_size_dataset
from tipgrade.dataset import Dataset, HumanScore, QuestionItem, StudentAnswer
from tipgrade.metrics import (
    COMBINATIONS,
    agreement,
    criterion_analysis,
    deviation_metrics,
    human_score_matrix,
    score_matrix,
    score_statistics,
)
from tipgrade.prompts import GENERIC_RUBRIC
from tipgrade.pipelines import SENTINEL, EvaluationRecord, Method, Status, additive_score

# Engineered JudgeLM distribution: the unique 73-score multiset with 65 threes
# whose sample statistics round to mean 2.822, median 3.0, std 0.653.
JUDGE_ROW_COUNTS = {0: 2, 1: 3, 2: 2, 3: 65, 4: 1}
# 110 paired deviations with sum|d| = 104 and sum d^2 = 162.
AGREEMENT_DEVIATIONS = [0] * 32 + [1] * 55 + [-2] * 20 + [3] * 3


def oracle(xs):
    """Brute-force reference: plain loops, no statistics module."""
    n = len(xs)
    total = 0.0
    for x in xs:
        total += x
    mean = total / n
    s = sorted(xs)
    median = float(s[n // 2]) if n % 2 else (s[n // 2 - 1] + s[n // 2]) / 2
    sq = 0.0
    for x in xs:
        sq += (x - mean) ** 2
    std = math.sqrt(sq / (n - 1)) if n > 1 else None
    return mean, median, std


def oracle_dev(ds):
    n = len(ds)
    a = 0.0
    q = 0.0
    for d in ds:
        a += abs(d)
        q += d * d
    return a / n, math.sqrt(q / n)


def close(a, b):
    if a is None or b is None:
        return a is b
    return math.isclose(a, b, rel_tol=1e-12, abs_tol=1e-15)


def rec(qid, sid, score, method=Method.JUDGELM, model="m"):
    status = Status.OK if score != SENTINEL else Status.OVERFLOW
    rubric = GENERIC_RUBRIC if method is Method.REFERENCE_AIDED else None
    return EvaluationRecord(qid, sid, method, model, score, "", status, rubric_used=rubric)


def additive_rec(i, flags, reported=None):
    return EvaluationRecord(f"q{i // 11}", f"s{i % 11}", Method.ADDITIVE, "m", additive_score(*flags), "",
                            Status.OK, criteria_flags=flags, reported_score=reported)


# -- score statistics --------------------------------------------------------


def test_constant_vector():
    s = score_statistics([2, 2, 2])
    assert (s.n, s.mean, s.median, s.std) == (3, 2, 2, 0)


def test_zero_to_four():
    s = score_statistics([0, 1, 2, 3, 4])
    assert (s.n, s.mean, s.median) == (5, 2, 2)
    assert s.std == pytest.approx(1.5811388300841898, rel=1e-12)
    assert score_statistics([0, 1, 2, 3, 4], std="population").std == pytest.approx(math.sqrt(2), rel=1e-12)


def test_even_median_is_midpoint():
    assert score_statistics([1, 2, 3, 4]).median == 2.5


def test_empty():
    s = score_statistics([])
    assert s.n == 0 and s.mean is None and s.median is None and s.std is None


def test_sentinels_excluded_n73():
    records = [rec("q", f"s{i}", SENTINEL if i < 37 else 3) for i in range(110)]
    s = score_statistics(records)
    assert s.n == 73 and s.excluded == 37 and s.mean == 3


def test_judgelm_row_statistics():
    scores = [v for v, c in JUDGE_ROW_COUNTS.items() for _ in range(c)] + [SENTINEL] * 37
    s = score_statistics(scores)
    assert s.n == 73
    assert f"{s.mean:.3f},{s.median:.1f},{s.std:.3f}" == "2.822,3.0,0.653"


def test_judgelm_row_only_fits_sample_std():
    # every 73-score multiset with 65 threes; population std has no match
    hits = {"sample": [], "population": []}
    for c0, c1, c2 in itertools.product(range(9), repeat=3):
        c4 = 8 - c0 - c1 - c2
        if c4 < 0:
            continue
        xs = [0] * c0 + [1] * c1 + [2] * c2 + [3] * 65 + [4] * c4
        for conv in hits:
            s = score_statistics(xs, std=conv)
            if f"{s.mean:.3f},{s.median:.1f},{s.std:.3f}" == "2.822,3.0,0.653":
                hits[conv].append((c0, c1, c2, c4))
    assert hits == {"sample": [(2, 3, 2, 1)], "population": []}


def test_oracle_equivalence_1000_vectors():
    rng = random.Random(20240501)
    for _ in range(1000):
        xs = [rng.randint(0, 4) for _ in range(rng.randint(1, 50))]
        s = score_statistics(xs)
        mean, median, std = oracle(xs)
        assert close(s.mean, mean) and close(s.median, median) and close(s.std, std), xs
        human = [rng.randint(0, 4) for _ in xs]
        ds = [m - h for m, h in zip(xs, human)]
        mad, rmse = deviation_metrics(ds)
        omad, ormse = oracle_dev(ds)
        assert close(mad, omad) and close(rmse, ormse), ds


@given(st.lists(st.integers(-4, 4), min_size=1, max_size=50))
def test_rmse_at_least_mad(ds):
    mad, rmse = deviation_metrics(ds)
    assert rmse >= mad - 1e-12
    assert rmse >= abs(sum(ds) / len(ds)) - 1e-12


@given(st.lists(st.integers(0, 4), min_size=2, max_size=50), st.randoms())
def test_permutation_invariance(xs, rnd):
    ys = xs[:]
    rnd.shuffle(ys)
    a, b = score_statistics(xs), score_statistics(ys)
    assert a.n == b.n and a.median == b.median
    assert math.isclose(a.mean, b.mean, rel_tol=1e-12)
    assert math.isclose(a.std, b.std, rel_tol=1e-12, abs_tol=1e-15)


@given(st.lists(st.integers(0, 4), min_size=2, max_size=50), st.integers(0, 20))
def test_sentinel_exclusion(xs, k):
    a = score_statistics(xs)
    b = score_statistics(xs + [SENTINEL] * k)
    assert (a.n, a.mean, a.median, a.std) == (b.n, b.mean, b.median, b.std)
    assert b.excluded == k


# -- agreement ---------------------------------------------------------------


def test_agreement_identity():
    human = [HumanScore("q", f"s{i}", i % 5) for i in range(10)]
    a = agreement([rec("q", f"s{i}", i % 5) for i in range(10)], human)
    assert (a.mad, a.rmse) == (0, 0)


def test_agreement_hand_example():
    human = [HumanScore("q", "s1", 4), HumanScore("q", "s2", 2)]
    a = agreement([rec("q", "s1", 3), rec("q", "s2", 0)], human)
    assert a.mad == 1.5
    assert a.rmse == pytest.approx(math.sqrt(2.5), rel=1e-12)


def agreement_fixture():
    records, human = [], []
    for i, d in enumerate(AGREEMENT_DEVIATIONS):
        h = 1 if d >= 0 else 4
        records.append(rec(f"q{i // 11:02d}", f"s{i % 11:02d}", h + d, Method.REFERENCE_AIDED))
        human.append(HumanScore(f"q{i // 11:02d}", f"s{i % 11:02d}", h))
    return records, human


def test_agreement_engineered_fixture():
    records, human = agreement_fixture()
    a = agreement(records, human)
    assert a.n_paired == 110
    assert (f"{a.mad:.3f}", f"{a.rmse:.3f}") == ("0.945", "1.214")


def test_agreement_exclusions():
    human = [HumanScore("q", "s1", 2), HumanScore("q", "s2", 2)]
    records = [rec("q", "s1", 2), rec("q", "s2", SENTINEL), rec("q", "s3", 1)]
    a = agreement(records, human)
    assert (a.n_paired, a.excluded_sentinel, a.excluded_unpaired) == (1, 1, 1)
    assert len(a.deviations) == a.n_paired


def test_agreement_empty():
    a = agreement([], [])
    assert a.n_paired == 0 and a.mad is None and a.rmse is None


# -- criterion analysis ------------------------------------------------------


def criterion_count_records():
    # 4 C1, 76 C2, 27 C3 over 110 answers
    out = []
    for i in range(110):
        out.append(additive_rec(i, (i < 4, i < 76, 30 <= i < 57)))
    return out


def test_criterion_percentages():
    ca = criterion_analysis(criterion_count_records(), 110)
    assert ca.counts == (4, 76, 27)
    assert ca.percentages == (3.64, 69.09, 24.55)


def test_combination_counts():
    flags = [(False,) * 3] * 103 + [(True,) * 3] * 5 + [(True, True, False), (False, False, True)]
    ca = criterion_analysis([additive_rec(i, f) for i, f in enumerate(flags)], 110)
    expected = {c: 0 for c in COMBINATIONS}
    expected.update({(False, False, False): 103, (True, True, True): 5,
                     (True, True, False): 1, (False, False, True): 1})
    assert ca.combinations == expected
    assert sum(ca.combinations.values()) == ca.n_records == 110


def test_criterion_inconsistencies():
    recs = [additive_rec(0, (True, False, True), 1), additive_rec(1, (True, False, True), 3), additive_rec(2, (False,) * 3)]
    assert criterion_analysis(recs, 3).inconsistent == 1


def test_criterion_empty_and_wrong_method():
    ca = criterion_analysis([], 110)
    assert ca.counts == (0, 0, 0) and sum(ca.combinations.values()) == 0
    with pytest.raises(ValueError):
        criterion_analysis([rec("q", "s", 2)], 1)


# -- score matrix ------------------------------------------------------------


def test_single_cell():
    d = Dataset([QuestionItem("q1", "Q", "C", "R")], [StudentAnswer("q1", "s1", "A")])
    m = score_matrix([rec("q1", "s1", 3)], d)
    assert m.count("q1", 3) == 1
    assert sum(m.cells["q1"].values()) == 1


def test_matrix_sentinel_column_and_row_sums():
    d = full_size_dataset()
    from helpers import oversized_keys
    over = oversized_keys()
    records = [rec(a.question_id, a.student_id, SENTINEL if a.key in over else 2) for a in d.answers]
    m = score_matrix(records, d)
    assert m.histogram[-1] == 37
    assert all(m.row_sum(q) == 11 for q in m.question_ids)
    assert m.histogram == {s: sum(m.count(q, s) for q in m.question_ids) for s in m.histogram}
    assert len(m.long_rows()) == 60


def test_matrix_unknown_question():
    with pytest.raises(KeyError):
        score_matrix([rec("nope", "s", 1)], full_size_dataset())


def test_human_matrix():
    m = human_score_matrix(full_size_dataset())
    assert sum(m.histogram.values()) == 110
    assert m.histogram[-1] == 0
