"""Serialization of evaluation reports to JSON, CSV and Markdown."""

from __future__ import annotations

import csv
import io
import json
from typing import Iterable, Mapping, Sequence

from .detectors import METHODS
from .metrics import ClassMetrics, EvalReport, UnitTestBlock


def report_to_json(report: EvalReport) -> str:
    return json.dumps(report.to_dict(), indent=2) + "\n"


def report_from_dict(doc: Mapping) -> EvalReport:
    unit = doc.get("unit_tests")
    return EvalReport(
        method=doc["method"],
        tpr_q=doc["tpr_q"],
        threshold_tau=doc["threshold_tau"],
        per_class=[ClassMetrics(**c) for c in doc["per_class"]],
        mean_fpr=doc["mean_fpr"],
        mean_auroc=doc["mean_auroc"],
        mean_aupr_s=doc["mean_aupr_s"],
        mean_aupr_e=doc["mean_aupr_e"],
        cdf_points=[tuple(p) for p in doc["cdf_points"]],
        unit_tests=None if unit is None else UnitTestBlock(**unit),
    )


def _csv(rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(rows)
    return buf.getvalue()


def per_class_csv(report: EvalReport) -> str:
    rows = [["class_name", "n", "fpr_at_tpr", "auroc", "aupr_s", "aupr_e"]]
    rows += [[c.class_name, c.n, repr(c.fpr_at_tpr), repr(c.auroc), repr(c.aupr_s), repr(c.aupr_e)] for c in report.per_class]
    return _csv(rows)


def cdf_csv(report: EvalReport) -> str:
    return _csv([["fpr", "fraction_of_classes"]] + [[repr(x), repr(f)] for x, f in report.cdf_points])


def summary_rows(reports: Sequence[EvalReport]) -> list[dict]:
    """One row per method; FPR deltas are relative to MSP when it was evaluated."""
    msp = next((r for r in reports if r.method == "msp"), None)
    rows = []
    for r in reports:
        rows.append(
            {
                "method": r.method,
                "mean_fpr": r.mean_fpr,
                "delta_fpr_vs_msp": None if msp is None else r.mean_fpr - msp.mean_fpr,
                "mean_auroc": r.mean_auroc,
                "mean_aupr_s": r.mean_aupr_s,
                "mean_aupr_e": r.mean_aupr_e,
                "failed_unit_tests": None if r.unit_tests is None else r.unit_tests.failed,
            }
        )
    return rows


def summary_json(reports: Sequence[EvalReport]) -> str:
    return json.dumps(summary_rows(reports), indent=2) + "\n"


def summary_csv(reports: Sequence[EvalReport]) -> str:
    rows = summary_rows(reports)
    header = list(rows[0]) if rows else []
    return _csv([header] + [["" if row[k] is None else repr(row[k]) for k in header] for row in rows])


def _pct(x: float) -> str:
    return f"{100 * x:.1f}"


def _signed_pct(x: float | None) -> str:
    return "" if x is None else f"{100 * x:+.1f}"


def summary_markdown(reports: Sequence[EvalReport]) -> str:
    """Per-method table in percent; lower FPR deltas mean better than MSP."""
    lines = [
        "| Method | Mean FPR | Δ vs MSP | Mean AUROC | Mean AUPR-S | Mean AUPR-E | Failed unit tests |",
        "|---|---:|---:|---:|---:|---:|---:|",
    ]
    for row in summary_rows(reports):
        failed = "" if row["failed_unit_tests"] is None else str(row["failed_unit_tests"])
        lines.append(
            f"| {METHODS[row['method']].label} | {_pct(row['mean_fpr'])} | {_signed_pct(row['delta_fpr_vs_msp'])} "
            f"| {_pct(row['mean_auroc'])} | {_pct(row['mean_aupr_s'])} | {_pct(row['mean_aupr_e'])} | {failed} |"
        )
    return "\n".join(lines) + "\n"


def grid_markdown(grid: Mapping[str, Sequence[EvalReport]]) -> str:
    """Model x method grid of mean FPR (percent) with signed deltas vs MSP."""
    methods: list[str] = []
    for reports in grid.values():
        for r in reports:
            if r.method not in methods:
                methods.append(r.method)
    methods = [m for m in METHODS if m in methods]
    lines = [
        "| Model | " + " | ".join(METHODS[m].label for m in methods) + " |",
        "|---|" + "---:|" * len(methods),
    ]
    for model, reports in grid.items():
        by_method = {r.method: r for r in reports}
        msp = by_method.get("msp")
        cells = []
        for m in methods:
            r = by_method.get(m)
            if r is None:
                cells.append("")
            elif msp is None or m == "msp":
                cells.append(_pct(r.mean_fpr))
            else:
                cells.append(f"{_pct(r.mean_fpr)} ({_signed_pct(r.mean_fpr - msp.mean_fpr)})")
        lines.append(f"| {model} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def grid_csv(grid: Mapping[str, Sequence[EvalReport]]) -> str:
    rows = [["model", "method", "mean_fpr", "mean_auroc", "mean_aupr_s", "mean_aupr_e", "failed_unit_tests"]]
    for model, reports in grid.items():
        for r in reports:
            failed = "" if r.unit_tests is None else r.unit_tests.failed
            rows.append([model, r.method, repr(r.mean_fpr), repr(r.mean_auroc), repr(r.mean_aupr_s), repr(r.mean_aupr_e), failed])
    return _csv(rows)
