"""Bidirectional translation probe: prompting, chrF scoring and typology statistics."""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
import math
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .llm.gateway import ChatRequest, Gateway, TransportError
from .metrics import ChrfParams, corpus_chrf
from .problem_model import GlottologMapping, resolve_resource_class
from .reporting import ABSENT, Table
from .stats import StatsError, anova_one_way, spearman_rho

logger = logging.getLogger(__name__)

E2T_TEMPLATE = "Translate the following sentence from English to {target_lang} using the {script} script:\nInput: {input_sentence}"
T2E_TEMPLATE = "Translate the following sentence {target_lang} to English:\nInput: {input_sentence}"

PROBE_TEMPERATURE = 0.1
PROBE_THINKING_BUDGET = 0
DEFAULT_K = 10
CORPUS_COLUMNS = ("lang_name", "iso639_3", "script", "sentence_id", "english", "target")


class Direction(str, enum.Enum):
    E2T = "E2T"
    T2E = "T2E"


def parse_directions(value: str) -> list[Direction]:
    if value == "both":
        return [Direction.E2T, Direction.T2E]
    return [Direction(value)]


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class ProbeLanguage:
    name: str
    iso639_3: str
    script: str

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.name, self.iso639_3, self.script)


@dataclass(frozen=True)
class ProbeSentence:
    language: ProbeLanguage
    sentence_id: str
    english: str
    target: str


def load_corpus(path: str | Path, k: int = DEFAULT_K) -> list[ProbeSentence]:
    """Read the probe CSV, keeping the first ``k`` rows per (language, script)."""
    if k < 1:
        raise CorpusError("k must be positive")
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CorpusError(f"{path}: {exc}") from exc
    reader = csv.DictReader(io.StringIO(text))
    missing = [c for c in CORPUS_COLUMNS if c not in (reader.fieldnames or [])]
    if missing:
        raise CorpusError(f"{path}: missing columns {', '.join(missing)}")
    kept: dict[tuple[str, str, str], list[ProbeSentence]] = defaultdict(list)
    seen: set[tuple[tuple[str, str, str], str]] = set()
    for lineno, row in enumerate(reader, 2):
        values = {c: (row.get(c) or "").strip() for c in CORPUS_COLUMNS}
        empty = [c for c in CORPUS_COLUMNS if not values[c]]
        if empty:
            raise CorpusError(f"{path}:{lineno}: empty {', '.join(empty)}")
        lang = ProbeLanguage(values["lang_name"], values["iso639_3"], values["script"])
        if (lang.key, values["sentence_id"]) in seen:
            raise CorpusError(f"{path}:{lineno}: duplicate sentence_id {values['sentence_id']} for {lang.name}")
        seen.add((lang.key, values["sentence_id"]))
        if len(kept[lang.key]) < k:
            kept[lang.key].append(ProbeSentence(lang, values["sentence_id"], values["english"], values["target"]))
    return [s for key in kept for s in kept[key]]


def load_families(path: str | Path | None) -> dict[str, str]:
    if path is None:
        return {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or not {"iso639_3", "family"} <= set(reader.fieldnames):
            raise CorpusError(f"{path}: languages file needs columns iso639_3,family")
        return {row["iso639_3"].strip(): row["family"].strip() for row in reader if row["family"].strip()}


def probe_prompt(sentence: ProbeSentence, direction: Direction) -> str:
    if direction is Direction.E2T:
        return E2T_TEMPLATE.format(target_lang=sentence.language.name, script=sentence.language.script,
                                   input_sentence=sentence.english)
    return T2E_TEMPLATE.format(target_lang=sentence.language.name, input_sentence=sentence.target)


def reference_for(sentence: ProbeSentence, direction: Direction) -> str:
    return sentence.target if direction is Direction.E2T else sentence.english


@dataclass(frozen=True)
class ProbeOutput:
    sentence: ProbeSentence
    direction: Direction
    hypothesis: str
    finish_reason: str


@dataclass(frozen=True)
class ProbeSettings:
    model_id: str
    temperature: float = PROBE_TEMPERATURE
    thinking_budget: int | None = PROBE_THINKING_BUDGET
    parallelism: int = 8


def run_probe(sentences: Sequence[ProbeSentence], directions: Sequence[Direction], gateway: Gateway,
              settings: ProbeSettings) -> list[ProbeOutput]:
    """One chat call per sentence and direction; failed calls are recorded as empty output."""
    jobs = [(s, d) for d in directions for s in sentences]

    def call(job: tuple[ProbeSentence, Direction]) -> ProbeOutput:
        sentence, direction = job
        req = ChatRequest.single(settings.model_id, probe_prompt(sentence, direction),
                                 temperature=settings.temperature, thinking_budget=settings.thinking_budget)
        try:
            resp = gateway.complete_chat(req)
        except TransportError as exc:
            logger.warning("probe call failed for %s/%s: %s", sentence.language.name, sentence.sentence_id, exc)
            return ProbeOutput(sentence, direction, "", "error")
        return ProbeOutput(sentence, direction, resp.text, resp.finish_reason.value)

    with ThreadPoolExecutor(max_workers=max(1, settings.parallelism)) as pool:
        return list(pool.map(call, jobs))


@dataclass(frozen=True)
class LanguageScore:
    language: ProbeLanguage
    glottocode: str | None
    resource_class: int | None
    family: str | None
    direction: Direction
    mean_chrf: float | None
    n_scored: int
    n_missing: int


def score_probe(outputs: Iterable[ProbeOutput], mapping: GlottologMapping,
                families: Mapping[str, str] | None = None, skip_empty: bool = True,
                params: ChrfParams = ChrfParams()) -> list[LanguageScore]:
    families = families or {}
    grouped: dict[tuple[tuple[str, str, str], Direction], list[ProbeOutput]] = defaultdict(list)
    langs: dict[tuple[str, str, str], ProbeLanguage] = {}
    for out in outputs:
        grouped[(out.sentence.language.key, out.direction)].append(out)
        langs[out.sentence.language.key] = out.sentence.language
    scores = []
    for (key, direction) in sorted(grouped, key=lambda kd: (kd[0], kd[1].value)):
        lang = langs[key]
        pairs = [(o.hypothesis, reference_for(o.sentence, direction)) for o in grouped[(key, direction)]]
        result = corpus_chrf(pairs, params, skip_empty)
        scores.append(LanguageScore(lang, mapping.glottocode(lang.iso639_3),
                                    resolve_resource_class(lang.iso639_3, mapping),
                                    families.get(lang.iso639_3), direction,
                                    result.mean, result.n_scored, result.n_missing))
    return scores


# -- report tables ------------------------------------------------------------

def _fmt(value: float | None, digits: int = 4) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ABSENT
    return f"{value:.{digits}f}"


def _opt(value: object) -> str:
    return ABSENT if value is None else str(value)


def probe_table(scores: Sequence[LanguageScore]) -> Table:
    table = Table(("language", "glottocode", "script", "class", "direction", "mean_chrf", "n_missing"))
    for s in scores:
        table.rows.append((s.language.name, _opt(s.glottocode), s.language.script, _opt(s.resource_class),
                           s.direction.value, _fmt(s.mean_chrf), str(s.n_missing)))
    return table


def missing_table(scores: Sequence[LanguageScore]) -> Table:
    """Languages with any empty output, split by direction."""
    table = Table(("language", "glottocode", "script", "class", "missing_e2t", "missing_t2e", "total"))
    by_lang: dict[tuple[str, str, str], dict[Direction, int]] = defaultdict(dict)
    info: dict[tuple[str, str, str], LanguageScore] = {}
    for s in scores:
        by_lang[s.language.key][s.direction] = s.n_missing
        info[s.language.key] = s
    for key in sorted(by_lang):
        e2t = by_lang[key].get(Direction.E2T, 0)
        t2e = by_lang[key].get(Direction.T2E, 0)
        if e2t + t2e == 0:
            continue
        s = info[key]
        table.rows.append((s.language.name, _opt(s.glottocode), s.language.script, _opt(s.resource_class),
                           str(e2t), str(t2e), str(e2t + t2e)))
    return table


def spearman_table(scores: Sequence[LanguageScore]) -> Table:
    table = Table(("direction", "n_languages", "rho", "note"))
    for direction in Direction:
        usable = [s for s in scores if s.direction is direction and s.resource_class is not None
                  and s.mean_chrf is not None]
        if not any(s.direction is direction for s in scores):
            continue
        try:
            rho = spearman_rho([float(s.resource_class) for s in usable], [s.mean_chrf for s in usable])
            table.rows.append((direction.value, str(len(usable)), _fmt(rho), ""))
        except StatsError as exc:
            table.rows.append((direction.value, str(len(usable)), ABSENT, str(exc)))
    return table


ANOVA_FACTORS = ("family", "class", "script")


def _factor(s: LanguageScore, factor: str) -> str | None:
    if factor == "family":
        return s.family
    if factor == "class":
        return None if s.resource_class is None else str(s.resource_class)
    return s.language.script


def anova_table(scores: Sequence[LanguageScore]) -> Table:
    """One row per factor and direction; observations are per-language means."""
    table = Table(("factor", "direction", "eta_p_squared", "p_value", "note"))
    for factor in ANOVA_FACTORS:
        for direction in Direction:
            rows = [s for s in scores if s.direction is direction and s.mean_chrf is not None]
            if not any(s.direction is direction for s in scores):
                continue
            groups: dict[str, list[float]] = defaultdict(list)
            for s in rows:
                label = _factor(s, factor)
                if label is not None:
                    groups[label].append(float(s.mean_chrf))
            try:
                res = anova_one_way(groups)
                table.rows.append((factor, direction.value, _fmt(res.eta_p_squared), _fmt(res.p_value, 6), ""))
            except StatsError as exc:
                table.rows.append((factor, direction.value, ABSENT, ABSENT, str(exc)))
    return table


def outputs_jsonl(outputs: Sequence[ProbeOutput]) -> str:
    lines = []
    for o in outputs:
        lines.append(json.dumps({
            "language": o.sentence.language.name,
            "iso639_3": o.sentence.language.iso639_3,
            "script": o.sentence.language.script,
            "sentence_id": o.sentence.sentence_id,
            "direction": o.direction.value,
            "hypothesis": o.hypothesis,
            "finish_reason": o.finish_reason,
        }, ensure_ascii=False, sort_keys=True))
    return "".join(line + "\n" for line in lines)
