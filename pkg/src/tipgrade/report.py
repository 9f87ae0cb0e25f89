"""Write the report bundle: CSV tables plus a plain-text summary."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Iterable

from .dataset import Dataset
from .metrics import (
    COMBINATIONS,
    CRITERIA,
    SAMPLE,
    SCORE_COLUMNS,
    agreement,
    criterion_analysis,
    human_score_matrix,
    human_statistics,
    score_matrix,
    score_statistics,
)
from .pipelines import METHOD_ORDER, EvaluationRecord, Method

REPORT_FILES = (
    "stats.csv",
    "agreement.csv",
    "criteria.csv",
    "combinations.csv",
    "heatmap.csv",
    "histogram.csv",
    "deviations.csv",
    "summary.txt",
)


def _fmt(x: float | None, places: int = 3) -> str:
    return "" if x is None else f"{x:.{places}f}"


def _groups(records: Iterable[EvaluationRecord]) -> dict[tuple[str, Method], list[EvaluationRecord]]:
    groups: dict[tuple[str, Method], list[EvaluationRecord]] = {}
    for r in records:
        groups.setdefault((r.model_name, r.method), []).append(r)
    return dict(sorted(groups.items(), key=lambda kv: (kv[0][0], METHOD_ORDER.index(kv[0][1]))))


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def _table(header: list[str], rows: list[list]) -> str:
    cells = [header] + [[str(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells)


def emit_report(records: Iterable[EvaluationRecord], dataset: Dataset, out_dir: str | Path, std: str = SAMPLE) -> dict:
    """Compute every analysis over ``records`` and write it under ``out_dir``.

    Returns a dict with the written paths and the summary text.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = sorted(records, key=lambda r: r.key)
    groups = _groups(records)
    total_answers = len(dataset.answers)
    std_col = f"std_{std}"

    stats_rows = []
    if dataset.human_scores:
        hs = human_statistics(dataset.human_scores, std)
        stats_rows.append(["none", "Human", hs.n, _fmt(hs.mean), _fmt(hs.median, 1), _fmt(hs.std)])
    for (model, method), recs in groups.items():
        s = score_statistics(recs, std)
        stats_rows.append([model, method.value, s.n, _fmt(s.mean), _fmt(s.median, 1), _fmt(s.std)])

    agreement_rows, deviation_rows = [], []
    if dataset.human_scores:
        human = dataset.human_score_map()
        for (model, method), recs in groups.items():
            ag = agreement(recs, human)
            agreement_rows.append([model, method.value, ag.n_paired, _fmt(ag.mad), _fmt(ag.rmse)])
            deviation_rows += [[model, method.value, q, s, d] for q, s, d in ag.deviations]

    criteria_rows, combo_rows = [], []
    for (model, method), recs in groups.items():
        if method is not Method.ADDITIVE:
            continue
        ca = criterion_analysis(recs, total_answers)
        for (cid, name), count, pct in zip(CRITERIA, ca.counts, ca.percentages):
            criteria_rows.append([model, cid, name, count, f"{pct:.2f}", total_answers])
        for combo in COMBINATIONS:
            combo_rows.append([model, *(str(f).lower() for f in combo), ca.combinations[combo]])

    heat_rows, hist_rows = [], []
    matrices = []
    if dataset.human_scores:
        matrices.append(("none", "Human", human_score_matrix(dataset)))
    matrices += [(model, method.value, score_matrix(recs, dataset)) for (model, method), recs in groups.items()]
    for model, label, m in matrices:
        heat_rows += [[model, label, q, s, c] for q, s, c in m.long_rows()]
        hist_rows += [[model, label, s, m.histogram[s]] for s in SCORE_COLUMNS]

    _write_csv(out / "stats.csv", ["model", "method", "n", "mean", "median", std_col], stats_rows)
    _write_csv(out / "agreement.csv", ["model", "method", "n_paired", "mad", "rmse"], agreement_rows)
    _write_csv(out / "criteria.csv", ["model", "criterion", "name", "count", "percentage", "total_answers"], criteria_rows)
    _write_csv(out / "combinations.csv", ["model", "c1", "c2", "c3", "count"], combo_rows)
    _write_csv(out / "heatmap.csv", ["model", "method", "question_id", "score", "count"], heat_rows)
    _write_csv(out / "histogram.csv", ["model", "method", "score", "count"], hist_rows)
    _write_csv(out / "deviations.csv", ["model", "method", "question_id", "student_id", "deviation"], deviation_rows)

    parts = [
        f"Score statistics (standard deviation: {std}, sentinels excluded)",
        _table(["model", "method", "N", "mean", "median", "std"], stats_rows),
        "",
        "Agreement with human scores",
        _table(["model", "method", "n_paired", "MAD", "RMSE"], agreement_rows),
    ]
    if criteria_rows:
        parts += ["", f"Criterion fulfilment (percent of {total_answers} answers)",
                  _table(["model", "criterion", "name", "count", "percent", "of"], criteria_rows)]
    summary = "\n".join(parts) + "\n"
    (out / "summary.txt").write_text(summary, encoding="utf-8")
    return {"paths": {name: out / name for name in REPORT_FILES}, "summary": summary}
