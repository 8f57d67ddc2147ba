"""``harness`` command line: run, probe, judge, gen-reasoning, report and kb."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import uuid
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from . import __version__
from .cot_judge import (
    JudgeScorecard,
    Rubric,
    ScorecardError,
    aggregate_scorecards,
    build_judge_prompt,
    dumps_scorecards,
    parse_judge_scores,
)
from .grading import FuzzyBackend, GradingConfig, Normalization
from .kb.index import IngestionError, KbIndex, SearchFilters, SearchMode, SearchQuery, read_manifest
from .llm.gateway import ChatRequest, Gateway, Message, Role, TransportError
from .llm.providers import build_gateway, load_toml
from .llm.structured import repair_prompt
from .orchestrator import PipelineConfig, PlanError, problem_block, run_experiment
from .problem_model import GlottologMapping, Problem, ProblemLoadError, parse_problem_set
from .probe import (
    CorpusError,
    ProbeSettings,
    anova_table,
    load_corpus,
    load_families,
    missing_table,
    outputs_jsonl,
    parse_directions,
    probe_table,
    run_probe,
    score_probe,
    spearman_table,
)
from .reporting import distribution_tables, graded_pairs, load_record, summary_table, write_table

logger = logging.getLogger("olyharness")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

REASONING_PROMPT = """## Prompt:
As an expert in linguistics solve the following problem. Given the following IOL problem and its answer, generate a detailed, step-by-step chain of thoughts that could specifically and reasonably lead to the answer. Focus on the reasoning process, essential linguistic rules, logical deductions, and the final solution. Make your whole output into a markdown file.

## Problem:
{problem_text}

## Solution:
{solution_text}

## Your response:
"""

DEFAULT_CACHE_DIR = ".harness-cache"
DEFAULT_OUT = "out"


class ConfigError(ValueError):
    pass


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class Context:
    """Resolved global options shared by every subcommand."""

    def __init__(self, args: argparse.Namespace, gateway: Gateway | None = None) -> None:
        self.args = args
        self.config: dict[str, Any] = {}
        if args.config:
            try:
                self.config = load_toml(args.config)
            except (OSError, ValueError) as exc:
                raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        self.config_dir = Path(args.config).resolve().parent if args.config else Path.cwd()
        self.parallelism = args.parallelism or int(self.section("run").get("parallelism", 8))
        if self.parallelism < 1:
            raise ConfigError("--parallelism must be positive")
        self.cache_dir = self.arg_path(args.cache_dir, "cache", "dir") or Path(DEFAULT_CACHE_DIR)
        self.out = self.arg_path(args.out, "output", "dir") or Path(DEFAULT_OUT)
        self.started = _utc_now()
        self.warnings: list[str] = []
        self.outputs: list[str] = []
        self._gateway = gateway

    def section(self, name: str) -> dict[str, Any]:
        value = self.config.get(name, {})
        if not isinstance(value, dict):
            raise ConfigError(f"[{name}] must be a table")
        return value

    def path(self, value: str) -> Path:
        """Resolve a path found in the config file, relative to that file."""
        return self.config_dir / Path(value)

    def arg_path(self, cli_value: str | None, section: str, key: str) -> Path | None:
        if cli_value:
            return Path(cli_value)
        value = self.section(section).get(key)
        return self.path(value) if value else None

    @property
    def gateway(self) -> Gateway:
        if self._gateway is None:
            try:
                self._gateway = build_gateway(self.config, self.cache_dir, self.parallelism)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        return self._gateway

    def warn(self, message: str) -> None:
        logger.warning(message)
        self.warnings.append(message)

    def write(self, name: str, text: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
        self.outputs.append(name)
        return path

    def table(self, stem: str, table) -> None:
        for p in write_table(self.out, stem, table):
            self.outputs.append(p.name)

    def write_manifest(self, command: str, extra: Mapping[str, Any] | None = None) -> None:
        stats = self._gateway.stats() if self._gateway else {"hits": 0, "misses": 0, "network_calls": 0}
        manifest = {
            "run_id": f"{datetime.now(timezone.utc):%Y%m%dT%H%M%SZ}-{uuid.uuid4().hex[:8]}",
            "command": command,
            "version": __version__,
            "config": self.config,
            "started": self.started,
            "finished": _utc_now(),
            "outputs": sorted(set(self.outputs)),
            "cache": stats,
            "warnings": list(self.warnings),
            **(extra or {}),
        }
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True, default=str) + "\n",
                                                encoding="utf-8")


def _load_problems(ctx: Context, cli_value: str | None) -> list[Problem]:
    path = ctx.arg_path(cli_value, "benchmark", "path")
    if path is None:
        raise ConfigError("no problem set given (use --problems or [benchmark] path)")
    return parse_problem_set(path)


def _grading_config(ctx: Context) -> GradingConfig:
    g = dict(ctx.section("grading"))
    unknown = set(g) - {"w_answer", "w_explanation", "casefold", "fuzzy_backend", "embedding_threshold",
                        "judge_model", "embedding_model"}
    if unknown:
        raise ConfigError(f"unknown [grading] keys: {', '.join(sorted(unknown))}")
    try:
        return GradingConfig(
            w_answer=g.pop("w_answer", "1/2"),
            w_explanation=g.pop("w_explanation", "1/2"),
            normalization=Normalization(casefold=bool(g.pop("casefold", False))),
            fuzzy_backend=FuzzyBackend(g.pop("fuzzy_backend", FuzzyBackend.JudgeLLM.value)),
            embedding_threshold=float(g.pop("embedding_threshold", 0.85)),
            judge_model=g.pop("judge_model", None),
            embedding_model=g.pop("embedding_model", None),
        )
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"[grading]: {exc}") from exc


def _kb_index(ctx: Context, index_dir: str | Path, embedding_model: str | None) -> KbIndex:
    embedder = None
    if embedding_model:
        gateway = ctx.gateway
        embedder = lambda texts: gateway.embed_texts(list(texts), embedding_model)  # noqa: E731
    return KbIndex(index_dir, embedder)


# -- commands ------------------------------------------------------------------

def cmd_run(ctx: Context, args: argparse.Namespace) -> int:
    problems = _load_problems(ctx, args.problems)
    if not problems:
        raise ConfigError("problem set is empty")
    pipeline_section = dict(ctx.section("pipeline"))
    if "guide_path" in pipeline_section:
        pipeline_section["guide_path"] = str(ctx.path(pipeline_section["guide_path"]))
    try:
        cfg = PipelineConfig.from_mapping(pipeline_section, parallelism=ctx.parallelism)
    except (PlanError, TypeError) as exc:
        raise ConfigError(f"[pipeline]: {exc}") from exc
    grading = _grading_config(ctx)
    kb = None
    if cfg.kind.value == "grammar_rag":
        kb_section = ctx.section("kb")
        index_dir = ctx.arg_path(None, "kb", "index")
        if index_dir is None:
            raise ConfigError("grammar_rag needs [kb] index")
        kb = _kb_index(ctx, index_dir, kb_section.get("embedding_model"))
    try:
        record = run_experiment(problems, cfg, grading, ctx.gateway, kb)
    except PlanError as exc:
        raise ConfigError(str(exc)) from exc
    ctx.write("experiment.json", record.to_json())
    for result in record.results:
        if result.report is not None:
            ctx.write(f"reports/{result.problem.problem_id}.json",
                      json.dumps(result.report.to_dict(), indent=1, sort_keys=True) + "\n")
    ctx.table("summary", summary_table([record.to_dict()]))
    tallies = record.to_dict()["tallies"]
    ctx.write_manifest("run", {"tallies": tallies})
    print(summary_table([record.to_dict()]).to_text(), end="")
    if tallies["errors"]:
        ctx.warn(f"{tallies['errors']} of {tallies['problems']} problems failed")
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_probe(ctx: Context, args: argparse.Namespace) -> int:
    section = ctx.section("probe")
    corpus_path = ctx.arg_path(args.corpus, "probe", "corpus")
    if corpus_path is None:
        raise ConfigError("no probe corpus given (use --corpus or [probe] corpus)")
    model = args.model or section.get("model")
    if not model:
        raise ConfigError("no probe model given (use --model or [probe] model)")
    k = args.k or int(section.get("k", 10))
    try:
        sentences = load_corpus(corpus_path, k)
        families = load_families(ctx.arg_path(args.languages, "probe", "languages"))
        directions = parse_directions(args.direction or section.get("direction", "both"))
    except (CorpusError, OSError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    mapping_path = ctx.arg_path(args.glottolog, "probe", "glottolog")
    mapping = GlottologMapping.from_csv(mapping_path) if mapping_path else GlottologMapping.default()
    settings = ProbeSettings(model, float(section.get("temperature", 0.1)),
                             int(section.get("thinking_budget", 0)), ctx.parallelism)
    outputs = run_probe(sentences, directions, ctx.gateway, settings)
    scores = score_probe(outputs, mapping, families, skip_empty=not args.zero_empty)
    ctx.write("outputs.jsonl", outputs_jsonl(outputs))
    ctx.table("probe", probe_table(scores))
    ctx.table("missing", missing_table(scores))
    spearman = spearman_table(scores)
    ctx.table("spearman", spearman)
    ctx.table("anova", anova_table(scores))
    for row in spearman.rows:
        if row[3]:
            ctx.warn(f"spearman {row[0]}: {row[3]}")
    ctx.write_manifest("probe")
    print(probe_table(scores).to_text(), end="")
    return EXIT_OK


def _judge_one(gateway: Gateway, model: str, prompt: str, problem: Problem) -> JudgeScorecard:
    messages = [Message(Role.user, "Evaluate the target model reasoning now.")]
    req = ChatRequest(model, tuple(messages), prompt, 0)
    resp = gateway.complete_chat(req)
    try:
        return parse_judge_scores(resp.text, judge_model=model, problem_ref=problem.key)
    except ScorecardError as exc:
        retry = ChatRequest(model, (*messages, Message(Role.assistant, resp.text),
                                    Message(Role.user, f"{exc}. " + repair_prompt("object keyed by the 11 metric codes"))),
                            prompt, 0)
        return parse_judge_scores(gateway.complete_chat(retry).text, judge_model=model, problem_ref=problem.key)


def cmd_judge(ctx: Context, args: argparse.Namespace) -> int:
    section = ctx.section("judge")
    model = args.judge_model or section.get("model")
    if not model:
        raise ConfigError("no judge model given (use --judge-model or [judge] model)")
    rubric_path = ctx.arg_path(args.rubric, "judge", "rubric")
    try:
        rubric = Rubric.from_file(rubric_path) if rubric_path else Rubric.default()
        record = load_record(args.record)
    except (OSError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    problems = {p.key: p for p in _load_problems(ctx, args.problems)}
    jobs = []
    for result in record.get("results", []):
        if result.get("status") != "graded":
            continue
        key = tuple(result["problem_ref"])
        problem = problems.get(key)
        if problem is None:
            ctx.warn(f"problem {key[0]}-{key[1]} is not in the benchmark; skipped")
            continue
        if not problem.gold_reasoning.strip():
            ctx.warn(f"problem {problem.problem_id} has no gold reasoning; skipped")
            continue
        attempt = result.get("attempt") or {}
        trace = attempt.get("reasoning") or attempt.get("raw_output") or ""
        if not trace.strip():
            ctx.warn(f"problem {problem.problem_id} has an empty reasoning trace; skipped")
            continue
        jobs.append((problem, build_judge_prompt(rubric, problem.gold_reasoning, trace)))

    failures = 0

    def run(job: tuple[Problem, str]) -> JudgeScorecard | None:
        nonlocal failures
        problem, prompt = job
        try:
            return _judge_one(ctx.gateway, model, prompt, problem)
        except (TransportError, ScorecardError) as exc:
            ctx.warn(f"judging {problem.problem_id} failed: {exc}")
            failures += 1
            return None

    with ThreadPoolExecutor(max_workers=ctx.parallelism) as pool:
        cards = [c for c in pool.map(run, jobs) if c is not None]
    ctx.write("scorecards.jsonl", dumps_scorecards(cards))
    aggregate = aggregate_scorecards(cards).to_dict() if cards else None
    ctx.write("scorecard_aggregate.json", json.dumps(aggregate, indent=1, sort_keys=True) + "\n")
    ctx.write_manifest("judge", {"scored": len(cards), "warnings_count": len(ctx.warnings)})
    return EXIT_RUNTIME if failures else EXIT_OK


def reasoning_prompt(problem: Problem) -> str:
    return REASONING_PROMPT.format(problem_text=problem_block(problem), solution_text=problem.solution)


def cmd_gen_reasoning(ctx: Context, args: argparse.Namespace) -> int:
    model = args.model or ctx.section("gen_reasoning").get("model")
    if not model:
        raise ConfigError("no model given (use --model or [gen_reasoning] model)")
    problems = _load_problems(ctx, args.problems)
    failures = 0
    for problem in problems:
        if not problem.solution.strip():
            ctx.warn(f"problem {problem.problem_id} has no solution text; skipped")
            continue
        req = ChatRequest.single(model, reasoning_prompt(problem), temperature=float(args.temperature))
        try:
            text = ctx.gateway.complete_chat(req).text
        except TransportError as exc:
            ctx.warn(f"reasoning for {problem.problem_id} failed: {exc}")
            failures += 1
            continue
        ctx.write(f"{problem.year}-{problem.number}.md", text if text.endswith("\n") else text + "\n")
    ctx.write_manifest("gen-reasoning")
    return EXIT_RUNTIME if failures else EXIT_OK


def cmd_report(ctx: Context, args: argparse.Namespace) -> int:
    try:
        records = [load_record(p) for p in args.records]
    except (OSError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    pairs = [pair for r in records for pair in graded_pairs(r)]
    if not pairs:
        ctx.warn("no graded problems in the given records")
    for key, table in distribution_tables(pairs).items():
        ctx.table(f"distribution_{key}", table)
        print(f"# by {key}\n{table.to_text()}")
    ctx.table("summary", summary_table(records))
    ctx.write_manifest("report", {"records": [str(p) for p in args.records]})
    return EXIT_OK


def cmd_kb_ingest(ctx: Context, args: argparse.Namespace) -> int:
    index_dir = ctx.arg_path(args.index, "kb", "index")
    if index_dir is None:
        raise ConfigError("no index directory (use --index or [kb] index)")
    try:
        docs = read_manifest(args.manifest)
    except (IngestionError, OSError) as exc:
        raise ConfigError(str(exc)) from exc
    index = _kb_index(ctx, index_dir, args.embedding_model or ctx.section("kb").get("embedding_model"))
    failures = 0
    for doc in docs:
        try:
            ids = index.ingest(doc)
            print(f"{doc.doc_id}\t{len(ids)} chunks")
        except IngestionError as exc:
            logger.error("%s", exc)
            failures += 1
    return EXIT_RUNTIME if failures else EXIT_OK


def cmd_kb_search(ctx: Context, args: argparse.Namespace) -> int:
    index_dir = ctx.arg_path(args.index, "kb", "index")
    if index_dir is None:
        raise ConfigError("no index directory (use --index or [kb] index)")
    mode = SearchMode(args.mode)
    model = args.embedding_model or ctx.section("kb").get("embedding_model")
    if mode is not SearchMode.FullText and not model:
        raise ConfigError(f"{mode.value} search needs an embedding model")
    index = _kb_index(ctx, index_dir, model)

    def opt(values: Sequence[str] | None) -> frozenset[str] | None:
        return frozenset(values) if values else None

    filters = SearchFilters(opt(args.glottocode), opt(args.family), opt(args.macroarea), opt(args.country))
    try:
        hits = index.search(SearchQuery(args.query, mode, filters, args.top_k))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    for rank, hit in enumerate(hits, 1):
        header = hit.chunk.context_header or "-"
        print(f"{rank}\t{hit.score:.6f}\t{hit.chunk.chunk_id}\t{hit.chunk.glottocode}\t{header}")
    return EXIT_OK


# -- argument parsing --------------------------------------------------------

def _add_globals(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, help="TOML run/provider config")
    parser.add_argument("--cache-dir", default=d, help=f"response cache directory (default {DEFAULT_CACHE_DIR})")
    parser.add_argument("--out", default=d, help=f"output directory (default {DEFAULT_OUT})")
    parser.add_argument("--parallelism", type=int, default=d, help="global concurrency limit")
    parser.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS if suppress else 0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="harness", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    _add_globals(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _add_globals(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="solve and grade a problem set")
    p.add_argument("--problems", help="problem JSON file or directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("probe", parents=[common], help="bidirectional translation probe")
    p.add_argument("--corpus", help="CSV: lang_name,iso639_3,script,sentence_id,english,target")
    p.add_argument("--languages", help="optional CSV: iso639_3,family")
    p.add_argument("--glottolog", help="replacement iso639_3,glottocode,resource_class table")
    p.add_argument("--direction", choices=["E2T", "T2E", "both"])
    p.add_argument("--model")
    p.add_argument("--k", type=int, help="sentences per language (default 10)")
    p.add_argument("--zero-empty", action="store_true", help="score empty outputs as 0 instead of excluding them")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("judge", parents=[common], help="score reasoning traces with the Check-of-Thought rubric")
    p.add_argument("--record", required=True, help="experiment.json from a run")
    p.add_argument("--problems", help="benchmark problems (for gold reasoning)")
    p.add_argument("--judge-model")
    p.add_argument("--rubric", help="replacement rubric Markdown")
    p.set_defaults(func=cmd_judge)

    p = sub.add_parser("gen-reasoning", parents=[common], help="draft reasoning traces from official solutions")
    p.add_argument("--problems")
    p.add_argument("--model")
    p.add_argument("--temperature", default="0")
    p.set_defaults(func=cmd_gen_reasoning)

    p = sub.add_parser("report", parents=[common], help="score distributions by family, subject and type")
    p.add_argument("records", nargs="+")
    p.set_defaults(func=cmd_report)

    kb = sub.add_parser("kb", parents=[common], help="grammar knowledge base")
    kb_sub = kb.add_subparsers(dest="kb_command", required=True)
    p = kb_sub.add_parser("ingest", parents=[common])
    p.add_argument("--manifest", required=True, help="JSON lines, one document per line")
    p.add_argument("--index")
    p.add_argument("--embedding-model")
    p.set_defaults(func=cmd_kb_ingest)
    p = kb_sub.add_parser("search", parents=[common])
    p.add_argument("query")
    p.add_argument("--index")
    p.add_argument("--mode", choices=[m.value for m in SearchMode], default=SearchMode.Hybrid.value)
    p.add_argument("--glottocode", action="append")
    p.add_argument("--family", action="append")
    p.add_argument("--macroarea", action="append")
    p.add_argument("--country", action="append")
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--embedding-model")
    p.set_defaults(func=cmd_kb_search)
    return parser


def main(argv: Sequence[str] | None = None, gateway: Gateway | None = None) -> int:
    """Entry point. ``gateway`` overrides the one built from config (used for recording fixtures)."""
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    func: Callable[[Context, argparse.Namespace], int] = args.func
    try:
        ctx = Context(args, gateway)
        return func(ctx, args)
    except (ConfigError, ProblemLoadError, PlanError) as exc:
        print(f"harness: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TransportError as exc:
        print(f"harness: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
