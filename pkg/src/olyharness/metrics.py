"""Character n-gram F-score (chrF) at sentence and corpus level."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence


@dataclass(frozen=True)
class ChrfParams:
    char_order: int = 6
    beta: Fraction | float = 2
    whitespace_stripped: bool = True

    def __post_init__(self) -> None:
        if self.char_order < 1:
            raise ValueError("char_order must be >= 1")
        if not self.beta > 0:
            raise ValueError("beta must be positive")


def _ngrams(s: str, n: int) -> Counter[str]:
    return Counter(s[i:i + n] for i in range(len(s) - n + 1))


def _prepare(s: str, strip_ws: bool) -> str:
    return "".join(s.split()) if strip_ws else s


def chrf(hypothesis: str, reference: str, p: ChrfParams = ChrfParams()) -> float:
    """Sentence chrF on a 0-100 scale.

    Orders for which either side has no n-grams are left out of the
    precision/recall averages, matching the common reference tooling.
    """
    ref = _prepare(reference, p.whitespace_stripped)
    if not ref:
        raise ValueError("reference must be nonempty")
    hyp = _prepare(hypothesis, p.whitespace_stripped)
    if not hyp:
        return 0.0
    precisions: list[float] = []
    recalls: list[float] = []
    for n in range(1, p.char_order + 1):
        h, r = _ngrams(hyp, n), _ngrams(ref, n)
        h_total, r_total = sum(h.values()), sum(r.values())
        if h_total == 0 or r_total == 0:
            continue
        match = sum((h & r).values())
        precisions.append(match / h_total)
        recalls.append(match / r_total)
    if not precisions:
        return 0.0
    prec = sum(precisions) / len(precisions)
    rec = sum(recalls) / len(recalls)
    if prec + rec == 0:
        return 0.0
    b2 = float(p.beta) ** 2
    return 100.0 * (1 + b2) * prec * rec / (b2 * prec + rec)


@dataclass(frozen=True)
class CorpusChrf:
    mean: float | None
    n_scored: int
    n_missing: int


def corpus_chrf(pairs: Sequence[tuple[str, str]], p: ChrfParams = ChrfParams(),
                skip_empty: bool = True) -> CorpusChrf:
    """Mean of sentence scores; empty hypotheses count as missing.

    With ``skip_empty`` the missing pairs are left out of the mean, otherwise
    they contribute 0. ``mean`` is None when nothing was scored.
    """
    if not pairs:
        raise ValueError("corpus_chrf needs at least one pair")
    scores: list[float] = []
    missing = 0
    for hyp, ref in pairs:
        if not hyp.strip():
            missing += 1
            if skip_empty:
                continue
            scores.append(0.0)
            continue
        scores.append(chrf(hyp, ref, p))
    mean = sum(scores) / len(scores) if scores else None
    return CorpusChrf(mean, len(scores), missing)
