"""Rank correlation, one-way ANOVA and grouped score summaries."""

from __future__ import annotations

import enum
import math
from collections import defaultdict
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import betainc

from .grading import Bucket, GradeReport
from .problem_model import TypologyAnnotation


class StatsError(ValueError):
    pass


def average_ranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks with ties given the mean of the positions they span."""
    arr = np.asarray(values, dtype=np.float64)
    order = np.argsort(arr, kind="mergesort")
    ranks = np.empty(len(arr), dtype=np.float64)
    i = 0
    while i < len(arr):
        j = i
        while j + 1 < len(arr) and arr[order[j + 1]] == arr[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def spearman_rho(x: Sequence[float], y: Sequence[float]) -> float:
    if len(x) != len(y):
        raise StatsError(f"length mismatch: {len(x)} vs {len(y)}")
    if len(x) < 3:
        raise StatsError("spearman_rho needs at least 3 pairs")
    rx, ry = average_ranks(x), average_ranks(y)
    dx, dy = rx - rx.mean(), ry - ry.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise StatsError("constant input: correlation is undefined")
    rho = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, rho))


@dataclass(frozen=True)
class AnovaResult:
    f: float
    p_value: float
    eta_p_squared: float
    df_between: int
    df_within: int
    ss_between: float
    ss_within: float


def f_survival(f: float, d1: int, d2: int) -> float:
    """P(F > f) for an F(d1, d2) variable, via the regularized incomplete beta."""
    if math.isnan(f):
        return math.nan
    if math.isinf(f):
        return 0.0
    if f <= 0:
        return 1.0
    return float(betainc(d2 / 2, d1 / 2, d2 / (d2 + d1 * f)))


def anova_one_way(groups: Mapping[str, Sequence[float]]) -> AnovaResult:
    samples = [np.asarray(v, dtype=np.float64) for _, v in sorted(groups.items())]
    if len(samples) < 2:
        raise StatsError("ANOVA needs at least 2 groups")
    if any(len(s) == 0 for s in samples):
        raise StatsError("every ANOVA group needs at least one observation")
    k = len(samples)
    n = sum(len(s) for s in samples)
    if n - k <= 0:
        raise StatsError(f"no within-group degrees of freedom (n={n}, k={k})")
    grand = np.concatenate(samples).mean()
    ssb = float(sum(len(s) * (s.mean() - grand) ** 2 for s in samples))
    ssw = float(sum(((s - s.mean()) ** 2).sum() for s in samples))
    total = ssb + ssw
    eta = 0.0 if total == 0 else ssb / total
    if ssw == 0:
        f = math.inf if ssb > 0 else math.nan
    else:
        f = (ssb / (k - 1)) / (ssw / (n - k))
    return AnovaResult(f, f_survival(f, k - 1, n - k), eta, k - 1, n - k, ssb, ssw)


class GroupKey(str, enum.Enum):
    family = "family"
    subject = "subject"
    type = "type"


@dataclass(frozen=True)
class DistributionSummary:
    key: GroupKey
    group: str
    n: int
    mean: float
    median: float
    std: float
    bucket_counts: tuple[int, int, int, int]

    def to_row(self) -> dict[str, str | int]:
        return {
            "key": self.key.value,
            "group": self.group,
            "n": self.n,
            "mean": f"{self.mean:.6f}",
            "median": f"{self.median:.6f}",
            "std": f"{self.std:.6f}",
            "B1": self.bucket_counts[0],
            "B2": self.bucket_counts[1],
            "B3": self.bucket_counts[2],
            "B4": self.bucket_counts[3],
        }


def _labels(ann: TypologyAnnotation, key: GroupKey) -> list[str]:
    if key is GroupKey.family:
        return [ann.language_family]
    if key is GroupKey.type:
        return [ann.type.value]
    return sorted(s.value for s in ann.subjects)


def summarize_scores(key: GroupKey, group: str, scores: Sequence[Fraction]) -> DistributionSummary:
    ordered = sorted(scores)
    n = len(ordered)
    mean = sum(ordered, Fraction(0)) / n
    var = sum(((s - mean) ** 2 for s in ordered), Fraction(0)) / n
    counts = [0, 0, 0, 0]
    for s in ordered:
        counts[list(Bucket).index(Bucket.of(s))] += 1
    return DistributionSummary(key, group, n, float(mean), float(ordered[(n - 1) // 2]),
                               math.sqrt(var), tuple(counts))


def score_distribution(reports: Iterable[tuple[GradeReport, TypologyAnnotation]],
                       key: GroupKey | str) -> list[DistributionSummary]:
    """Per-group n, mean, lower median, population std and bucket counts."""
    key = GroupKey(key)
    groups: dict[str, list[Fraction]] = defaultdict(list)
    for report, ann in reports:
        for label in _labels(ann, key):
            groups[label].append(report.final_score)
    return [summarize_scores(key, g, groups[g]) for g in sorted(groups)]
