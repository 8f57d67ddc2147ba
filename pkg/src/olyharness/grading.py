"""Deterministic grading of final solutions.

Each answer is graded by its spec mode (exact, select, fuzzy), the
explanation is graded against the problem's rule checklist, and the two
are combined with configurable weights. All scores are exact fractions so
bucket edges never move through floating-point drift.
"""

from __future__ import annotations

import enum
import logging
import math
import unicodedata
from dataclasses import dataclass, field
from decimal import Decimal
from fractions import Fraction
from typing import Any, Callable, Mapping, Protocol, Sequence

from .problem_model import AnswerMode, AnswerSpec, Problem
from .llm.structured import StructuredOutputError, parse_structured_output
from .templates import substitute

logger = logging.getLogger(__name__)

FUZZY_PROMPT = (
    "You are grading a linguistics answer by meaning. Reference: {ref}\n"
    "Candidate: {cand}\n"
    "Answer exactly YES or NO."
)

CHECKLIST_PROMPT = """You are grading the rule explanation of a linguistics olympiad solution.
Compare the explanation below against our rule checklist. For each rule, decide
whether the explanation states that rule correctly (true) or not (false).

Rule checklist:
{rules}

Explanation:
{explanation}

Reply with a JSON array of {n} booleans, one per rule, in checklist order."""

CHECKLIST_REMINDER = (
    "\n\nYour previous reply could not be parsed. Reply with only a JSON array of "
    "{n} booleans (true/false), nothing else."
)


class Judge(Protocol):
    def ask(self, prompt: str) -> str: ...


class GradingError(RuntimeError):
    pass


class FuzzyBackend(str, enum.Enum):
    JudgeLLM = "judge_llm"
    EmbeddingThreshold = "embedding_threshold"
    AlwaysZero = "always_zero"


class Bucket(str, enum.Enum):
    B1 = "B1"  # [0, 0.25)
    B2 = "B2"  # [0.25, 0.5)
    B3 = "B3"  # [0.5, 0.75)
    B4 = "B4"  # [0.75, 1]

    @classmethod
    def of(cls, score: Fraction) -> Bucket:
        if not 0 <= score <= 1:
            raise ValueError(f"score {score} outside [0, 1]")
        if score < Fraction(1, 4):
            return cls.B1
        if score < Fraction(1, 2):
            return cls.B2
        if score < Fraction(3, 4):
            return cls.B3
        return cls.B4


@dataclass(frozen=True)
class Normalization:
    nfc: bool = True
    trim: bool = True
    casefold: bool = False


@dataclass(frozen=True)
class GradingConfig:
    w_answer: Fraction = Fraction(1, 2)
    w_explanation: Fraction = Fraction(1, 2)
    normalization: Normalization = Normalization()
    fuzzy_backend: FuzzyBackend = FuzzyBackend.JudgeLLM
    embedding_threshold: float = 0.85
    judge_model: str | None = None
    embedding_model: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "w_answer", to_fraction(self.w_answer))
        object.__setattr__(self, "w_explanation", to_fraction(self.w_explanation))
        if self.w_answer < 0 or self.w_explanation < 0:
            raise ValueError("grading weights must be nonnegative")
        if self.w_answer + self.w_explanation != 1:
            raise ValueError(
                f"w_answer + w_explanation must equal 1 (got {self.w_answer} + {self.w_explanation})"
            )

    def snapshot(self) -> dict[str, Any]:
        return {
            "w_answer": str(self.w_answer),
            "w_explanation": str(self.w_explanation),
            "normalization": {
                "nfc": self.normalization.nfc,
                "trim": self.normalization.trim,
                "casefold": self.normalization.casefold,
            },
            "fuzzy_backend": self.fuzzy_backend.value,
            "embedding_threshold": self.embedding_threshold,
            "judge_model": self.judge_model,
            "embedding_model": self.embedding_model,
        }


def to_fraction(value: Fraction | int | float | str) -> Fraction:
    """Exact fraction for a config value; floats go through their shortest repr."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(repr(value))
    return Fraction(value)


@dataclass
class SolutionAttempt:
    problem_ref: tuple[int, int]
    sub_answers: dict[str, list[str]]
    explanation: str
    raw_output: str
    format_ok: bool
    reasoning: str = ""
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "problem_ref": list(self.problem_ref),
            "sub_answers": {k: list(v) for k, v in self.sub_answers.items()},
            "explanation": self.explanation,
            "reasoning": self.reasoning,
            "raw_output": self.raw_output,
            "format_ok": self.format_ok,
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> SolutionAttempt:
        return cls(
            problem_ref=(int(d["problem_ref"][0]), int(d["problem_ref"][1])),
            sub_answers={k: list(v) for k, v in d.get("sub_answers", {}).items()},
            explanation=d.get("explanation", ""),
            raw_output=d.get("raw_output", ""),
            format_ok=bool(d.get("format_ok", False)),
            reasoning=d.get("reasoning", ""),
            flags=list(d.get("flags", [])),
        )


@dataclass(frozen=True)
class SubVerdict:
    mode: AnswerMode
    credit: Fraction
    cardinality_violation: bool = False
    error: str | None = None


@dataclass
class GradeReport:
    problem_ref: tuple[int, int]
    answer_score: Fraction
    explanation_score: Fraction
    final_score: Fraction
    per_sub: dict[str, SubVerdict]
    rules_matched: int
    rules_total: int
    bucket: Bucket
    per_rule: list[bool] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"problem_ref": list(self.problem_ref)}
        for name in ("answer_score", "explanation_score", "final_score"):
            value = getattr(self, name)
            d[name] = format_score(value)
            d[f"{name}_exact"] = f"{value.numerator}/{value.denominator}"
        d["bucket"] = self.bucket.value
        d["rules_matched"] = self.rules_matched
        d["rules_total"] = self.rules_total
        d["per_rule"] = list(self.per_rule)
        d["per_sub"] = {
            key: {
                "mode": v.mode.value,
                "credit": format_score(v.credit),
                "credit_exact": f"{v.credit.numerator}/{v.credit.denominator}",
                "cardinality_violation": v.cardinality_violation,
                "error": v.error,
            }
            for key, v in self.per_sub.items()
        }
        d["flags"] = list(self.flags)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> GradeReport:
        per_sub = {
            key: SubVerdict(
                mode=AnswerMode(v["mode"]),
                credit=Fraction(v["credit_exact"]),
                cardinality_violation=bool(v["cardinality_violation"]),
                error=v.get("error"),
            )
            for key, v in d["per_sub"].items()
        }
        return cls(
            problem_ref=(int(d["problem_ref"][0]), int(d["problem_ref"][1])),
            answer_score=Fraction(d["answer_score_exact"]),
            explanation_score=Fraction(d["explanation_score_exact"]),
            final_score=Fraction(d["final_score_exact"]),
            per_sub=per_sub,
            rules_matched=int(d["rules_matched"]),
            rules_total=int(d["rules_total"]),
            bucket=Bucket(d["bucket"]),
            per_rule=[bool(b) for b in d.get("per_rule", [])],
            flags=list(d.get("flags", [])),
        )


def format_score(value: Fraction) -> str:
    """Six-digit decimal rendering of an exact score."""
    return f"{Decimal(value.numerator) / Decimal(value.denominator):.6f}"


# -- answers ----------------------------------------------------------------

def normalize_text(s: str, cfg: Normalization = Normalization()) -> str:
    if cfg.nfc:
        s = unicodedata.normalize("NFC", s)
    if cfg.trim:
        # str.strip() covers U+3000 IDEOGRAPHIC SPACE and the other Unicode spaces
        s = s.strip()
    if cfg.casefold:
        s = s.casefold()
    return s


def grade_exact(outputs: Sequence[str], spec: AnswerSpec, cfg: GradingConfig) -> Fraction:
    """1 if the single output matches any reference after normalization, else 0."""
    if len(outputs) != 1:
        return Fraction(0)
    got = normalize_text(outputs[0], cfg.normalization)
    refs = {normalize_text(r, cfg.normalization) for r in spec.references}
    return Fraction(1) if got in refs else Fraction(0)


def grade_select(outputs: Sequence[str], spec: AnswerSpec, cfg: GradingConfig) -> tuple[Fraction, bool]:
    """Jaccard credit between output and reference sets, plus the cardinality flag."""
    got = {normalize_text(o, cfg.normalization) for o in outputs}
    gold = {normalize_text(r, cfg.normalization) for r in spec.references}
    union = got | gold
    credit = Fraction(len(got & gold), len(union)) if union else Fraction(1)
    lo = spec.select_min if spec.select_min is not None else 1
    hi = spec.select_max if spec.select_max is not None else math.inf
    violation = not (lo <= len(outputs) <= hi)
    return credit, violation


def _cosine(a: Sequence[float], b: Sequence[float]) -> float:
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    return dot / (na * nb) if na and nb else 0.0


def grade_fuzzy(
    output: str,
    spec: AnswerSpec,
    backend: FuzzyBackend,
    judge: Judge | None = None,
    *,
    cfg: GradingConfig = GradingConfig(),
    embed: Callable[[list[str]], Sequence[Sequence[float]]] | None = None,
) -> Fraction:
    """Meaning-based credit for one output.

    A normalized verbatim match scores 1 without consulting any backend.
    Raises :class:`GradingError` when the judge or embedder fails.
    """
    norm = cfg.normalization
    cand = normalize_text(output, norm)
    if any(cand == normalize_text(r, norm) for r in spec.references):
        return Fraction(1)
    if backend is FuzzyBackend.AlwaysZero or not cand:
        return Fraction(0)
    if backend is FuzzyBackend.EmbeddingThreshold:
        if embed is None:
            raise GradingError("embedding backend selected but no embedder configured")
        try:
            vectors = embed([cand, *spec.references])
        except Exception as exc:
            raise GradingError(f"embedding failed: {exc}") from exc
        best = max(_cosine(vectors[0], v) for v in vectors[1:])
        return Fraction(1) if best >= cfg.embedding_threshold else Fraction(0)

    if judge is None:
        raise GradingError("judge backend selected but no judge configured")
    for ref in spec.references:
        prompt = substitute(FUZZY_PROMPT, {"ref": ref, "cand": output})
        try:
            reply = judge.ask(prompt)
        except Exception as exc:
            raise GradingError(f"fuzzy judge call failed: {exc}") from exc
        word = reply.strip().strip(".!*\"'`").upper()
        if word.startswith("YES"):
            return Fraction(1)
        if not word.startswith("NO"):
            raise GradingError(f"fuzzy judge reply is neither YES nor NO: {reply[:80]!r}")
    return Fraction(0)


# -- explanation ------------------------------------------------------------

def build_checklist_prompt(explanation: str, checklist: Sequence[str]) -> str:
    rules = "\n".join(f"{i}. {rule}" for i, rule in enumerate(checklist, start=1))
    fields = {"rules": rules, "explanation": explanation, "n": str(len(checklist))}
    return substitute(CHECKLIST_PROMPT, fields)


def _bool_vector(text: str, n: int) -> list[bool]:
    value = parse_structured_output(text, f"JSON array of {n} booleans", expect="array")
    if len(value) != n or not all(isinstance(v, bool) for v in value):
        raise StructuredOutputError(f"expected {n} booleans, got {value!r}", text)
    return value


def grade_rule_checklist(explanation: str, checklist: Sequence[str], judge: Judge) -> tuple[int, int, list[bool]]:
    """Count checklist rules the explanation states correctly.

    One judge call, plus one retry with a format reminder when the reply is
    unparseable. Raises :class:`GradingError` after the second failure.
    """
    if not checklist:
        raise ValueError("rule checklist is empty")
    n = len(checklist)
    if not explanation.strip():
        return 0, n, [False] * n
    prompt = build_checklist_prompt(explanation, checklist)
    for attempt in range(2):
        try:
            reply = judge.ask(prompt if attempt == 0 else prompt + CHECKLIST_REMINDER.format(n=n))
        except Exception as exc:
            raise GradingError(f"checklist judge call failed: {exc}") from exc
        try:
            per_rule = _bool_vector(reply, n)
        except StructuredOutputError:
            continue
        return sum(per_rule), n, per_rule
    raise GradingError("checklist judge reply unparseable after retry")


# -- composition ------------------------------------------------------------

def compose_final_score(
    verdicts: Mapping[str, SubVerdict],
    rules_matched: int,
    rules_total: int,
    cfg: GradingConfig,
    *,
    problem_ref: tuple[int, int] = (0, 0),
    per_rule: Sequence[bool] = (),
    flags: Sequence[str] = (),
) -> GradeReport:
    if verdicts:
        answer = sum((v.credit for v in verdicts.values()), Fraction(0)) / len(verdicts)
    else:
        answer = Fraction(0)
    explanation = Fraction(rules_matched, rules_total) if rules_total else Fraction(0)
    final = cfg.w_answer * answer + cfg.w_explanation * explanation
    return GradeReport(
        problem_ref=problem_ref,
        answer_score=answer,
        explanation_score=explanation,
        final_score=final,
        per_sub=dict(verdicts),
        rules_matched=rules_matched,
        rules_total=rules_total,
        bucket=Bucket.of(final),
        per_rule=list(per_rule),
        flags=list(flags),
    )


def grade_attempt(
    attempt: SolutionAttempt,
    problem: Problem,
    cfg: GradingConfig,
    judge: Judge | None = None,
    *,
    embed: Callable[[list[str]], Sequence[Sequence[float]]] | None = None,
) -> GradeReport:
    """Grade a well-formatted attempt. Judge failures zero the affected part and add a flag."""
    if not attempt.format_ok:
        raise ValueError("attempts that failed format checks are not graded")
    flags: list[str] = []
    verdicts: dict[str, SubVerdict] = {}
    for answer_id, spec in problem.answer_items():
        outputs = attempt.sub_answers.get(answer_id, [])
        if spec.mode is AnswerMode.Exact:
            verdicts[answer_id] = SubVerdict(spec.mode, grade_exact(outputs, spec, cfg), len(outputs) > 1)
        elif spec.mode is AnswerMode.Select:
            credit, violation = grade_select(outputs, spec, cfg)
            verdicts[answer_id] = SubVerdict(spec.mode, credit, violation)
        else:
            if len(outputs) != 1:
                verdicts[answer_id] = SubVerdict(spec.mode, Fraction(0), len(outputs) > 1)
                continue
            try:
                credit = grade_fuzzy(outputs[0], spec, cfg.fuzzy_backend, judge, cfg=cfg, embed=embed)
                verdicts[answer_id] = SubVerdict(spec.mode, credit)
            except GradingError as exc:
                logger.warning("fuzzy grading failed for %s/%s: %s", problem.problem_id, answer_id, exc)
                verdicts[answer_id] = SubVerdict(spec.mode, Fraction(0), error=str(exc))
                flags.append(f"fuzzy_error:{answer_id}")
    if any(v.cardinality_violation for v in verdicts.values()):
        flags.append("cardinality_violation")

    matched, total, per_rule = 0, len(problem.rule_checklist), []
    if not problem.rule_checklist:
        flags.append("empty_checklist")
    elif not attempt.explanation.strip():
        per_rule = [False] * total
    elif judge is None:
        flags.append("checklist_error")
        per_rule = [False] * total
    else:
        try:
            matched, total, per_rule = grade_rule_checklist(attempt.explanation, problem.rule_checklist, judge)
        except GradingError as exc:
            logger.warning("checklist grading failed for %s: %s", problem.problem_id, exc)
            flags.append("checklist_error")
            per_rule = [False] * total
    return compose_final_score(verdicts, matched, total, cfg, problem_ref=problem.key,
                               per_rule=per_rule, flags=flags)
