"""Benchmark data model: problems, answer specs, typology, Glottolog mapping.

Problems live on disk as one UTF-8 JSON document per file::

    {"year": 2003, "number": 2, "statement": "...",
     "sub_problems": [{"id": "a", "task_text": "...",
                       "answers": [{"tag": null, "references": ["..."]}]}],
     "rule_checklist": ["..."], "gold_reasoning": "...",
     "annotation": {"subjects": ["Numbers"], "type": "Pattern", "themes": [],
                    "language": "Egyptian Arabic", "family": "Semitic",
                    "glottocode": "egyp1253", "speakers": 68000000}}

An optional top-level ``"solution"`` string carries the official solution text.
"""

from __future__ import annotations

import csv
import enum
import json
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable

GLOTTOCODE_RE = re.compile(r"[a-z]{4}[0-9]{4}")

#: Unbounded select cardinality, written ``inf`` in tags.
INF = math.inf

_INT64_MAX = 2**63 - 1

_SELECT_RE = re.compile(r"<select(\d+),\s*(\d+|inf),\s*(\d+|inf)>")


def _label_key(s: str) -> str:
    return re.sub(r"[^0-9a-z]", "", s.lower())


class _LabelEnum(str, enum.Enum):
    """Enum whose values are display labels; lookup ignores case and punctuation."""

    @classmethod
    def parse(cls, raw: str):
        key = _label_key(raw)
        for member in cls:
            if key in (_label_key(member.value), _label_key(member.name)):
                return member
        raise ValueError(f"unknown {cls.__name__} {raw!r}")


class Subject(_LabelEnum):
    Compounding = "Compounding"
    Morphology = "Morphology"
    Numbers = "Numbers"
    PhonologyPhonetics = "Phonology and Phonetics"
    Semantics = "Semantics"
    Syntax = "Syntax"
    WritingSystem = "Writing System"
    Others = "Others"


class ProblemType(_LabelEnum):
    Rosetta = "Rosetta"
    MatchUp = "Match-up"
    Monolingual = "Monolingual"
    Pattern = "Pattern"
    Computational = "Computational"
    Text = "Text"


class Theme(_LabelEnum):
    Classical = "Classical"
    Comparative = "Comparative"
    Encrypted = "Encrypted"
    Kinship = "Kinship"
    Maps = "Maps"
    Mystery = "Mystery"
    MFL = "MFL"
    SensesFeelings = "Senses and Feelings"
    Stories = "Stories"
    Poetry = "Poetry"
    NoTheme = "No Theme"


class AnswerMode(str, enum.Enum):
    Exact = "exact"
    Fuzzy = "fuzzy"
    Select = "select"


class TagParseError(ValueError):
    def __init__(self, raw_tag: str, reason: str = "malformed answer tag") -> None:
        super().__init__(f"{reason}: {raw_tag!r}")
        self.raw_tag = raw_tag


class ProblemLoadError(ValueError):
    """Schema or consistency violation while loading a problem set."""

    def __init__(self, message: str, *, file: str | None = None,
                 problem_id: str | None = None, field: str | None = None) -> None:
        where = ", ".join(
            f"{k}={v}" for k, v in (("file", file), ("problem", problem_id), ("field", field)) if v
        )
        super().__init__(f"{message} ({where})" if where else message)
        self.file = file
        self.problem_id = problem_id
        self.field = field


@dataclass(frozen=True)
class AnswerTag:
    mode: AnswerMode
    select_len: int | None = None
    select_min: int | float | None = None
    select_max: int | float | None = None


def _bound(text: str) -> int | float:
    return INF if text == "inf" else int(text)


def parse_answer_tag(raw_tag: str | None) -> AnswerTag:
    """Parse a grading tag: ``None`` (exact), ``<fuzzy>`` or ``<selectL, MIN, MAX>``."""
    if raw_tag is None:
        return AnswerTag(AnswerMode.Exact)
    if not isinstance(raw_tag, str):
        raise TagParseError(repr(raw_tag))
    if raw_tag == "<fuzzy>":
        return AnswerTag(AnswerMode.Fuzzy)
    m = _SELECT_RE.fullmatch(raw_tag)
    if m is None:
        raise TagParseError(raw_tag)
    length, lo, hi = int(m.group(1)), _bound(m.group(2)), _bound(m.group(3))
    for v in (length, lo, hi):
        if v != INF and v > _INT64_MAX:
            raise TagParseError(raw_tag, "bound exceeds 64-bit range")
    if length < 1 or lo < 1 or hi < 1:
        raise TagParseError(raw_tag, "select bounds must be positive")
    if lo > hi:
        raise TagParseError(raw_tag, "select min exceeds max")
    return AnswerTag(AnswerMode.Select, length, lo, hi)


def format_answer_tag(tag: AnswerTag) -> str | None:
    if tag.mode is AnswerMode.Exact:
        return None
    if tag.mode is AnswerMode.Fuzzy:
        return "<fuzzy>"

    def fmt(v: int | float) -> str:
        return "inf" if v == INF else str(int(v))

    return f"<select{tag.select_len}, {fmt(tag.select_min)}, {fmt(tag.select_max)}>"


@dataclass(frozen=True)
class AnswerSpec:
    mode: AnswerMode
    references: tuple[str, ...]
    select_len: int | None = None
    select_min: int | float | None = None
    select_max: int | float | None = None

    def __post_init__(self) -> None:
        if not self.references:
            raise ValueError("answer spec needs at least one reference")
        if self.mode is AnswerMode.Select:
            if self.select_len != len(self.references):
                raise ValueError(
                    f"select length {self.select_len} != {len(self.references)} references"
                )
            if self.select_min is None or self.select_max is None or self.select_min > self.select_max:
                raise ValueError("select bounds invalid")

    @classmethod
    def from_tag(cls, raw_tag: str | None, references: Iterable[str]) -> AnswerSpec:
        tag = parse_answer_tag(raw_tag)
        return cls(tag.mode, tuple(references), tag.select_len, tag.select_min, tag.select_max)

    @property
    def tag(self) -> str | None:
        return format_answer_tag(
            AnswerTag(self.mode, self.select_len, self.select_min, self.select_max)
        )


@dataclass(frozen=True)
class SubProblem:
    id: str
    task_text: str
    answer_specs: tuple[AnswerSpec, ...]

    def answer_ids(self) -> list[str]:
        """Keys under which a model reports each answer of this sub-problem."""
        if len(self.answer_specs) == 1:
            return [self.id]
        return [f"{self.id}.{i}" for i in range(1, len(self.answer_specs) + 1)]


@dataclass(frozen=True)
class TypologyAnnotation:
    subjects: frozenset[Subject]
    type: ProblemType
    themes: frozenset[Theme]
    language: str
    language_family: str
    glottocode: str
    speakers: int

    def __post_init__(self) -> None:
        if not GLOTTOCODE_RE.fullmatch(self.glottocode):
            raise ValueError(f"glottocode {self.glottocode!r} does not match [a-z]{{4}}[0-9]{{4}}")
        if not self.subjects:
            raise ValueError("at least one subject is required")
        if self.speakers < 0:
            raise ValueError("speakers must be nonnegative")


@dataclass(frozen=True)
class Problem:
    year: int
    number: int
    statement: str
    sub_problems: tuple[SubProblem, ...]
    rule_checklist: tuple[str, ...]
    gold_reasoning: str
    annotation: TypologyAnnotation
    solution: str = ""

    @property
    def key(self) -> tuple[int, int]:
        return (self.year, self.number)

    @property
    def problem_id(self) -> str:
        return f"{self.year}-{self.number}"

    def answer_items(self) -> list[tuple[str, AnswerSpec]]:
        """All (answer id, spec) pairs in problem order."""
        items = []
        for sp in self.sub_problems:
            items.extend(zip(sp.answer_ids(), sp.answer_specs))
        return items

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "year": self.year,
            "number": self.number,
            "statement": self.statement,
            "sub_problems": [
                {
                    "id": sp.id,
                    "task_text": sp.task_text,
                    "answers": [{"tag": a.tag, "references": list(a.references)} for a in sp.answer_specs],
                }
                for sp in self.sub_problems
            ],
            "rule_checklist": list(self.rule_checklist),
            "gold_reasoning": self.gold_reasoning,
            "annotation": annotation_to_dict(self.annotation),
        }
        if self.solution:
            d["solution"] = self.solution
        return d


def annotation_to_dict(a: TypologyAnnotation) -> dict[str, Any]:
    return {
        "subjects": sorted(s.value for s in a.subjects),
        "type": a.type.value,
        "themes": sorted(t.value for t in a.themes),
        "language": a.language,
        "family": a.language_family,
        "glottocode": a.glottocode,
        "speakers": a.speakers,
    }


class _Reader:
    """Field access with errors that name the file, problem and field."""

    def __init__(self, file: str | None, problem_id: str | None = None) -> None:
        self.file = file
        self.problem_id = problem_id

    def fail(self, message: str, field: str) -> ProblemLoadError:
        return ProblemLoadError(message, file=self.file, problem_id=self.problem_id, field=field)

    def get(self, obj: dict, key: str, typ: type | tuple[type, ...], path: str, *, default: Any = ...) -> Any:
        if not isinstance(obj, dict):
            raise self.fail("expected an object", path)
        if key not in obj or obj[key] is None:
            if default is not ...:
                return default
            raise self.fail("missing required field", f"{path}{key}")
        value = obj[key]
        # bool is an int subclass; reject it where ints are expected
        if isinstance(value, bool) and bool not in (typ if isinstance(typ, tuple) else (typ,)):
            raise self.fail(f"expected {typ}, got bool", f"{path}{key}")
        if not isinstance(value, typ):
            raise self.fail(f"expected {getattr(typ, '__name__', typ)}, got {type(value).__name__}", f"{path}{key}")
        return value

    def str_list(self, obj: dict, key: str, path: str, *, default: Any = ...) -> list[str]:
        items = self.get(obj, key, list, path, default=default)
        for i, item in enumerate(items):
            if not isinstance(item, str):
                raise self.fail("expected a string", f"{path}{key}[{i}]")
        return items


def _enum_value(r: _Reader, enum_cls: type[_LabelEnum], raw: str, field: str):
    try:
        return enum_cls.parse(raw)
    except ValueError as exc:
        raise r.fail(str(exc), field) from None


def annotation_from_dict(d: dict, reader: _Reader | None = None, path: str = "annotation.") -> TypologyAnnotation:
    r = reader or _Reader(None)
    subjects = frozenset(
        _enum_value(r, Subject, s, f"{path}subjects") for s in r.str_list(d, "subjects", path)
    )
    if not subjects:
        raise r.fail("at least one subject is required", f"{path}subjects")
    ptype = _enum_value(r, ProblemType, r.get(d, "type", str, path), f"{path}type")
    themes = frozenset(
        _enum_value(r, Theme, t, f"{path}themes") for t in r.str_list(d, "themes", path, default=[])
    )
    glottocode = r.get(d, "glottocode", str, path)
    if not GLOTTOCODE_RE.fullmatch(glottocode):
        raise r.fail(f"glottocode {glottocode!r} does not match [a-z]{{4}}[0-9]{{4}}", f"{path}glottocode")
    speakers = r.get(d, "speakers", int, path, default=0)
    if speakers < 0:
        raise r.fail("speakers must be nonnegative", f"{path}speakers")
    return TypologyAnnotation(
        subjects=subjects,
        type=ptype,
        themes=themes,
        language=r.get(d, "language", str, path),
        language_family=r.get(d, "family", str, path),
        glottocode=glottocode,
        speakers=speakers,
    )


def problem_from_dict(d: Any, file: str | None = None) -> Problem:
    """Validate one problem document and build a :class:`Problem`."""
    r = _Reader(file)
    if not isinstance(d, dict):
        raise r.fail("problem document must be a JSON object", "<root>")
    year = r.get(d, "year", int, "")
    number = r.get(d, "number", int, "")
    r.problem_id = f"{year}-{number}"

    sub_problems = []
    seen_ids: set[str] = set()
    raw_subs = r.get(d, "sub_problems", list, "")
    if not raw_subs:
        raise r.fail("at least one sub-problem is required", "sub_problems")
    for i, sp in enumerate(raw_subs):
        path = f"sub_problems[{i}]."
        sp_id = r.get(sp, "id", str, path)
        if sp_id in seen_ids:
            raise r.fail(f"duplicate sub-problem id {sp_id!r}", f"{path}id")
        seen_ids.add(sp_id)
        answers = r.get(sp, "answers", list, path)
        if not answers:
            raise r.fail("at least one answer is required", f"{path}answers")
        specs = []
        for j, ans in enumerate(answers):
            apath = f"{path}answers[{j}]."
            refs = r.str_list(ans, "references", apath)
            tag = r.get(ans, "tag", str, apath, default=None)
            try:
                specs.append(AnswerSpec.from_tag(tag, refs))
            except ValueError as exc:
                raise r.fail(str(exc), f"{apath}tag") from None
        sub_problems.append(SubProblem(sp_id, r.get(sp, "task_text", str, path), tuple(specs)))

    return Problem(
        year=year,
        number=number,
        statement=r.get(d, "statement", str, ""),
        sub_problems=tuple(sub_problems),
        rule_checklist=tuple(r.str_list(d, "rule_checklist", "", default=[])),
        gold_reasoning=r.get(d, "gold_reasoning", str, "", default=""),
        annotation=annotation_from_dict(r.get(d, "annotation", dict, ""), r),
        solution=r.get(d, "solution", str, "", default=""),
    )


def _load_file(path: Path) -> list[Problem]:
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProblemLoadError(f"cannot read problem JSON: {exc}", file=str(path)) from None
    docs = doc if isinstance(doc, list) else [doc]
    return [problem_from_dict(item, str(path)) for item in docs]


def parse_problem_set(path: str | Path, *, require_checklist: bool = False) -> list[Problem]:
    """Load and validate every problem under ``path`` (a directory or one file).

    Problems come back sorted by (year, number).
    """
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.json"))
    elif path.is_file():
        files = [path]
    else:
        raise ProblemLoadError("problem set path does not exist", file=str(path))

    problems: list[Problem] = []
    origin: dict[tuple[int, int], str] = {}
    for f in files:
        for p in _load_file(f):
            if p.key in origin:
                raise ProblemLoadError(
                    f"duplicate problem (year, number) also defined in {origin[p.key]}",
                    file=str(f), problem_id=p.problem_id, field="year/number",
                )
            if require_checklist and not p.rule_checklist:
                raise ProblemLoadError("rule checklist is empty", file=str(f),
                                       problem_id=p.problem_id, field="rule_checklist")
            origin[p.key] = str(f)
            problems.append(p)
    problems.sort(key=lambda p: p.key)
    return problems


# -- Glottolog / resource-class mapping -------------------------------------

#: ISO codes whose Glottolog link had to be chosen by hand.
MANUAL_OVERRIDES = {
    "srd": "sard1257",
    "est": "esto1258",
    "kon": "koon1244",
    "zho": "mand1415",
    "grn": "east2555",
}


@dataclass(frozen=True)
class GlottologEntry:
    iso639_3: str
    glottocode: str
    resource_class: int | None


@dataclass
class GlottologMapping:
    entries: dict[str, GlottologEntry] = field(default_factory=dict)

    @classmethod
    def from_csv(cls, path: str | Path) -> GlottologMapping:
        with open(path, newline="", encoding="utf-8") as fh:
            return cls._from_rows(csv.DictReader(fh), str(path))

    @classmethod
    def default(cls) -> GlottologMapping:
        """The shipped ISO 639-3 to Glottocode table."""
        text = resources.files("olyharness").joinpath("data/glottolog_map.csv").read_text(encoding="utf-8")
        return cls._from_rows(csv.DictReader(text.splitlines()), "glottolog_map.csv")

    @classmethod
    def _from_rows(cls, rows: Iterable[dict[str, str]], source: str) -> GlottologMapping:
        entries: dict[str, GlottologEntry] = {}
        for lineno, row in enumerate(rows, start=2):
            iso = (row.get("iso639_3") or "").strip()
            code = (row.get("glottocode") or "").strip()
            raw_class = (row.get("resource_class") or "").strip()
            if not iso or not GLOTTOCODE_RE.fullmatch(code):
                raise ProblemLoadError(f"bad mapping row at line {lineno}", file=source, field="glottocode")
            if iso in entries:
                raise ProblemLoadError(f"duplicate iso639_3 {iso!r} at line {lineno}", file=source, field="iso639_3")
            cls_value = None
            if raw_class:
                cls_value = int(raw_class)
                if not 0 <= cls_value <= 5:
                    raise ProblemLoadError(f"resource class out of range at line {lineno}",
                                           file=source, field="resource_class")
            entries[iso] = GlottologEntry(iso, code, cls_value)
        return cls(entries)

    def glottocode(self, iso639_3: str) -> str | None:
        entry = self.entries.get(iso639_3)
        return entry.glottocode if entry else None

    def class_for_glottocode(self, glottocode: str) -> int | None:
        classes = {e.resource_class for e in self.entries.values() if e.glottocode == glottocode}
        return classes.pop() if len(classes) == 1 else None


def resolve_resource_class(iso639_3: str, mapping: GlottologMapping) -> int | None:
    """Resource class (0-5) for an ISO 639-3 code, or None when unknown."""
    entry = mapping.entries.get(iso639_3)
    return entry.resource_class if entry else None
