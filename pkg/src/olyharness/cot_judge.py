"""Check-of-Thought reasoning judge: prompt construction, scorecard parsing, aggregation."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .llm.structured import StructuredOutputError, parse_structured_output
from .templates import substitute

JUDGE_TEMPLATE = """Given the evaluation rules and metrics for model reasoning of IOL problems, consider the golden reasoning reference, and evaluate the target model reasoning with the metrics of five dimensions. 
evaluation rules and metrics (5-score):
{metrics}

scoring_:
{scoring}

golden reasoning reference:
{golden_reasoning_reference}

target model reasoning:
{model_reasoning}
"""

SCORING_MARKER = "<!-- scoring -->"


class Dimension(str, enum.Enum):
    I_ExtractStructure = "I"
    II_HypothesisRule = "II"
    III_Completeness = "III"
    IV_InternalLogic = "IV"
    V_Contradiction = "V"


class MetricCode(str, enum.Enum):
    SLVS_i = "SLVS_i"
    ISC = "ISC"
    HGA = "HGA"
    RIC = "RIC"
    IJC = "IJC"
    CCS = "CCS"
    SCR = "SCR"
    SLVS_iv = "SLVS_iv"
    ACR = "ACR"
    CDA = "CDA"
    ETS = "ETS"


DIMENSION_OF: dict[MetricCode, Dimension] = {
    MetricCode.SLVS_i: Dimension.I_ExtractStructure,
    MetricCode.ISC: Dimension.I_ExtractStructure,
    MetricCode.HGA: Dimension.II_HypothesisRule,
    MetricCode.RIC: Dimension.II_HypothesisRule,
    MetricCode.IJC: Dimension.II_HypothesisRule,
    MetricCode.CCS: Dimension.III_Completeness,
    MetricCode.SCR: Dimension.III_Completeness,
    MetricCode.SLVS_iv: Dimension.IV_InternalLogic,
    MetricCode.ACR: Dimension.IV_InternalLogic,
    MetricCode.CDA: Dimension.V_Contradiction,
    MetricCode.ETS: Dimension.V_Contradiction,
}

SCORE_MIN, SCORE_MAX = 1, 5


class ScorecardError(ValueError):
    pass


@dataclass(frozen=True)
class Rubric:
    metrics: str
    scoring: str
    source: str = "builtin"

    @classmethod
    def from_text(cls, text: str, source: str = "builtin") -> Rubric:
        if SCORING_MARKER not in text:
            raise ValueError(f"rubric {source} lacks the {SCORING_MARKER} separator")
        metrics, scoring = text.split(SCORING_MARKER, 1)
        return cls(metrics.strip(), scoring.strip(), source)

    @classmethod
    def from_file(cls, path: str | Path) -> Rubric:
        return cls.from_text(Path(path).read_text(encoding="utf-8"), str(path))

    @classmethod
    def default(cls) -> Rubric:
        text = resources.files("olyharness").joinpath("data/cot_rubric.md").read_text(encoding="utf-8")
        return cls.from_text(text)


def _json_instruction() -> str:
    codes = ", ".join(c.value for c in MetricCode)
    example = {c.value: {"score": 3, "justification": "..."} for c in list(MetricCode)[:2]}
    return (
        "\nRespond with a single JSON object and nothing else. It must have exactly these keys: "
        f"{codes}. Each value is an object with an integer \"score\" from {SCORE_MIN} to {SCORE_MAX} "
        "and a one-line \"justification\". Example shape (truncated): "
        f"{json.dumps(example)}\n"
    )


def build_judge_prompt(rubric: Rubric, grr: str, target: str) -> str:
    for label, value in (("rubric metrics", rubric.metrics), ("rubric scoring", rubric.scoring),
                         ("gold reasoning", grr), ("target reasoning", target)):
        if not value or not value.strip():
            raise ValueError(f"{label} must be nonempty")
    body = substitute(JUDGE_TEMPLATE, {
        "metrics": rubric.metrics,
        "scoring": rubric.scoring,
        "golden_reasoning_reference": grr,
        "model_reasoning": target,
    })
    return body + _json_instruction()


@dataclass(frozen=True)
class JudgeScorecard:
    scores: Mapping[MetricCode, int]
    justifications: Mapping[MetricCode, str] = field(default_factory=dict)
    judge_model: str = ""
    problem_ref: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        missing = [c.value for c in MetricCode if c not in self.scores]
        if missing:
            raise ScorecardError(f"scorecard is missing metrics: {', '.join(missing)}")
        for code, score in self.scores.items():
            if isinstance(score, bool) or not isinstance(score, int) or not SCORE_MIN <= score <= SCORE_MAX:
                raise ScorecardError(f"{code.value}: score {score!r} is not an integer in [{SCORE_MIN}, {SCORE_MAX}]")

    def to_dict(self) -> dict[str, Any]:
        return {
            "problem_ref": list(self.problem_ref) if self.problem_ref else None,
            "judge_model": self.judge_model,
            "scores": {c.value: self.scores[c] for c in MetricCode},
            "justifications": {c.value: self.justifications.get(c, "") for c in MetricCode},
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> JudgeScorecard:
        ref = d.get("problem_ref")
        return cls(
            {MetricCode(k): v for k, v in d["scores"].items()},
            {MetricCode(k): v for k, v in d.get("justifications", {}).items()},
            d.get("judge_model", ""),
            tuple(ref) if ref else None,
        )


def parse_judge_scores(text: str, *, judge_model: str = "",
                       problem_ref: tuple[int, int] | None = None) -> JudgeScorecard:
    """Read a judge reply into a validated scorecard.

    Values may be ``{"score": int, "justification": str}`` objects or bare
    integers. Unknown keys are ignored; missing ones are an error.
    """
    try:
        obj = parse_structured_output(text, "object keyed by metric code", expect="object")
    except StructuredOutputError as exc:
        raise ScorecardError(str(exc)) from exc
    scores: dict[MetricCode, int] = {}
    notes: dict[MetricCode, str] = {}
    for code in MetricCode:
        if code.value not in obj:
            raise ScorecardError(f"judge response is missing metric {code.value}")
        value = obj[code.value]
        if isinstance(value, Mapping):
            notes[code] = str(value.get("justification", ""))
            value = value.get("score")
        scores[code] = value
    return JudgeScorecard(scores, notes, judge_model, problem_ref)


@dataclass(frozen=True)
class ScorecardAggregate:
    n: int
    per_metric: Mapping[MetricCode, Fraction]
    per_dimension: Mapping[Dimension, Fraction]
    overall: Fraction

    def to_dict(self) -> dict[str, Any]:
        return {
            "n": self.n,
            "per_metric": {c.value: float(v) for c, v in self.per_metric.items()},
            "per_dimension": {d.value: float(v) for d, v in self.per_dimension.items()},
            "overall": float(self.overall),
        }


def aggregate_scorecards(cards: Sequence[JudgeScorecard]) -> ScorecardAggregate:
    if not cards:
        raise ValueError("aggregate_scorecards needs at least one scorecard")
    per_metric = {c: Fraction(sum(card.scores[c] for card in cards), len(cards)) for c in MetricCode}
    per_dimension = {}
    for dim in Dimension:
        members = [per_metric[c] for c in MetricCode if DIMENSION_OF[c] is dim]
        per_dimension[dim] = sum(members, Fraction(0)) / len(members)
    overall = sum(per_dimension.values(), Fraction(0)) / len(per_dimension)
    return ScorecardAggregate(len(cards), per_metric, per_dimension, overall)


def dumps_scorecards(cards: Iterable[JudgeScorecard]) -> str:
    return "".join(json.dumps(c.to_dict(), ensure_ascii=False, sort_keys=True) + "\n" for c in cards)


def loads_scorecards(text: str) -> list[JudgeScorecard]:
    return [JudgeScorecard.from_dict(json.loads(line)) for line in text.splitlines() if line.strip()]
