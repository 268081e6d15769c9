"""FPR@TPR, AUROC, AUPR and per-OOD-class reports.

AUPR is average precision, ``sum_k (R_k - R_{k-1}) * P_k``, where ``k`` runs
over distinct score values in descending order, so tied scores enter as a
single block. AUPR-S treats ID samples as positives; AUPR-E treats OOD
samples as positives and ranks by negated score.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from .errors import DataError

DEFAULT_TPR_Q = 0.95
DEFAULT_FAIL_THRESHOLD = 0.10
UNITTEST_PREFIX = "unittest/"


def _scores(x, what: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64).reshape(-1)
    if a.size == 0:
        raise DataError(f"{what} scores are empty")
    return a


def accepted_count(n: int, q: float) -> int:
    """Smallest count of ID samples that reaches a true positive rate of ``q``.

    ``ceil(q*n)``, evaluated after rounding ``q*n`` to 9 decimals so that
    decimal inputs such as ``q=0.07, n=100`` give 7 rather than 8.
    """
    return max(1, math.ceil(round(q * n, 9)))


def threshold_at_tpr(id_scores, q: float = DEFAULT_TPR_Q) -> float:
    """The ``ceil(q*N)``-th largest ID score."""
    if not 0.0 < q <= 1.0:
        raise DataError(f"TPR level must be in (0, 1], got {q}")
    s = _scores(id_scores, "ID")
    k = accepted_count(s.size, q)
    return float(np.sort(s)[s.size - k])


def fpr_at_tpr(id_scores, ood_scores, q: float = DEFAULT_TPR_Q) -> float:
    tau = threshold_at_tpr(id_scores, q)
    ood = _scores(ood_scores, "OOD")
    return int(np.count_nonzero(ood >= tau)) / ood.size


def auroc(id_scores, ood_scores) -> float:
    """Fraction of (ID, OOD) pairs where ID scores higher; ties count half.

    Uses sorted counts with integer numerators, so it equals the pairwise
    count exactly.
    """
    pos = _scores(id_scores, "ID")
    neg = np.sort(_scores(ood_scores, "OOD"))
    below = np.searchsorted(neg, pos, side="left")
    not_above = np.searchsorted(neg, pos, side="right")
    # twice the Mann-Whitney U: each win counts 2, each tie 1
    twice_u = int(below.sum()) + int(not_above.sum())
    return twice_u / (2 * pos.size * neg.size)


def average_precision(pos_scores, neg_scores) -> float:
    pos = _scores(pos_scores, "positive")
    neg = _scores(neg_scores, "negative")
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    pos_sorted = np.sort(pos)
    neg_sorted = np.sort(neg)
    tp = pos.size - np.searchsorted(pos_sorted, thresholds, side="left")
    fp = neg.size - np.searchsorted(neg_sorted, thresholds, side="left")
    gained = np.diff(tp, prepend=0)
    mask = gained > 0
    terms = (gained[mask] / pos.size) * (tp[mask] / (tp[mask] + fp[mask]))
    return math.fsum(terms.tolist())


def aupr(id_scores, ood_scores, positive: str = "ID") -> float:
    """AUPR-S (``positive="ID"``) or AUPR-E (``positive="OOD"``)."""
    if positive == "ID":
        return average_precision(id_scores, ood_scores)
    if positive == "OOD":
        return average_precision(-_scores(ood_scores, "OOD"), -_scores(id_scores, "ID"))
    raise DataError(f"positive must be 'ID' or 'OOD', got {positive!r}")


@dataclass(frozen=True)
class ClassMetrics:
    class_name: str
    n: int
    fpr_at_tpr: float
    auroc: float
    aupr_s: float
    aupr_e: float


@dataclass(frozen=True)
class UnitTestBlock:
    fpr: dict[str, float]
    failed: int
    fail_threshold: float


@dataclass(frozen=True)
class EvalReport:
    method: str
    tpr_q: float
    threshold_tau: float
    per_class: list[ClassMetrics]
    mean_fpr: float
    mean_auroc: float
    mean_aupr_s: float
    mean_aupr_e: float
    cdf_points: list[tuple[float, float]]
    unit_tests: UnitTestBlock | None = field(default=None)

    def to_dict(self) -> dict:
        return asdict(self)


def fpr_cdf(fprs) -> list[tuple[float, float]]:
    """Right-continuous empirical CDF of per-class FPRs at each distinct value."""
    values = np.sort(np.asarray(fprs, dtype=np.float64))
    if values.size == 0:
        return []
    distinct = np.unique(values)
    counts = np.searchsorted(values, distinct, side="right")
    return [(float(x), int(c) / values.size) for x, c in zip(distinct, counts)]


def area_over_cdf(points) -> float:
    """Integral of ``1 - F(x)`` over ``[0, 1]`` for a step CDF from :func:`fpr_cdf`."""
    area, prev_x, prev_f = [], 0.0, 0.0
    for x, f in points:
        area.append((x - prev_x) * (1.0 - prev_f))
        prev_x, prev_f = x, f
    area.append((1.0 - prev_x) * (1.0 - prev_f))
    return math.fsum(area)


def _mean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values)


def count_failed_unit_tests(unit_fprs: Mapping[str, float], fail_threshold: float = DEFAULT_FAIL_THRESHOLD) -> int:
    """Number of unit tests whose FPR is strictly above the threshold."""
    return sum(1 for v in unit_fprs.values() if v > fail_threshold)


def class_metrics(name: str, id_scores: np.ndarray, ood_scores: np.ndarray, tau: float) -> ClassMetrics:
    ood = _scores(ood_scores, f"OOD set {name!r}")
    return ClassMetrics(
        class_name=name,
        n=int(ood.size),
        fpr_at_tpr=int(np.count_nonzero(ood >= tau)) / ood.size,
        auroc=auroc(id_scores, ood),
        aupr_s=aupr(id_scores, ood, "ID"),
        aupr_e=aupr(id_scores, ood, "OOD"),
    )


def per_class_report(
    id_scores,
    ood_score_map: Mapping[str, np.ndarray],
    q: float = DEFAULT_TPR_Q,
    *,
    method: str = "",
    unit_score_map: Mapping[str, np.ndarray] | None = None,
    fail_threshold: float = DEFAULT_FAIL_THRESHOLD,
) -> EvalReport:
    """Metrics for every OOD class at one ID-derived threshold.

    Classes are reported in name order. Unit-test sets, if given, only feed the
    pass/fail block and stay out of the means and the CDF.
    """
    if not ood_score_map:
        raise DataError("at least one OOD set required")
    if not 0.0 <= fail_threshold <= 1.0:
        raise DataError(f"fail threshold must be in [0, 1], got {fail_threshold}")
    id_scores = _scores(id_scores, "ID")
    tau = threshold_at_tpr(id_scores, q)
    per_class = [class_metrics(name, id_scores, ood_score_map[name], tau) for name in sorted(ood_score_map)]
    unit_block = None
    if unit_score_map:
        unit_fpr = {}
        for name in sorted(unit_score_map):
            s = _scores(unit_score_map[name], f"unit test {name!r}")
            unit_fpr[name] = int(np.count_nonzero(s >= tau)) / s.size
        unit_block = UnitTestBlock(
            fpr=unit_fpr, failed=count_failed_unit_tests(unit_fpr, fail_threshold), fail_threshold=fail_threshold
        )
    return EvalReport(
        method=method,
        tpr_q=q,
        threshold_tau=tau,
        per_class=per_class,
        mean_fpr=_mean(c.fpr_at_tpr for c in per_class),
        mean_auroc=_mean(c.auroc for c in per_class),
        mean_aupr_s=_mean(c.aupr_s for c in per_class),
        mean_aupr_e=_mean(c.aupr_e for c in per_class),
        cdf_points=fpr_cdf([c.fpr_at_tpr for c in per_class]),
        unit_tests=unit_block,
    )
