"""Solver pipelines: planning the call graph, executing it, and running experiments."""

from __future__ import annotations

import enum
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .grading import Bucket, GradeReport, GradingConfig, SolutionAttempt, format_score, grade_attempt
from .kb.agent import GrammarSettings, retrieve, summarize_grammar
from .kb.index import KbIndex
from .llm.gateway import ChatRequest, ChatResponse, Gateway, Message, Role, TransportError
from .llm.structured import StructuredOutputError, parse_structured_output, repair_prompt
from .problem_model import AnswerMode, Problem, annotation_to_dict

logger = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.75


class PipelineKind(str, enum.Enum):
    Vanilla = "vanilla"
    Guided = "guided"
    GrammarRag = "grammar_rag"
    SingleAgentRounds = "single_agent_rounds"
    MoA = "moa"


class AgentRole(str, enum.Enum):
    Solver = "solver"
    Aggregator = "aggregator"
    FinalAggregator = "final"
    GrammarAgent = "grammar"


class PlanError(ValueError):
    pass


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    kind: PipelineKind
    solver_models: tuple[str, ...]
    aggregator_model: str | None = None
    N: int = 1
    M: int = 1
    R: int = 0
    rounds: int | None = None
    temperature: Fraction | float = DEFAULT_TEMPERATURE
    guide_path: str | None = None
    parallelism: int = 8
    max_tokens: int | None = None
    thinking_budget: int | None = None
    grammar_model: str | None = None
    kb_top_k: int = 5

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "kind", PipelineKind(self.kind))
        except ValueError:
            raise PlanError(f"unknown pipeline kind {self.kind!r}") from None
        object.__setattr__(self, "solver_models", tuple(self.solver_models))
        if not self.solver_models:
            raise PlanError("solver_models must name at least one model")
        if self.N < 1 or self.M < 1:
            raise PlanError("N and M must be positive")
        if self.R < 0:
            raise PlanError("R must be nonnegative")
        if self.parallelism < 1:
            raise PlanError("parallelism must be positive")
        if not (self.temperature >= 0 and self.temperature != float("inf")):
            raise PlanError("temperature must be finite and nonnegative")
        if self.kind is PipelineKind.MoA:
            if self.rounds is None:
                object.__setattr__(self, "rounds", self.R + 2)
            elif self.rounds != self.R + 2:
                raise PlanError(f"MoA requires rounds = R + 2 (R={self.R} gives {self.R + 2}, got {self.rounds})")
            if len(self.solver_models) not in (1, self.N):
                raise PlanError(f"MoA needs 1 or N={self.N} solver models, got {len(self.solver_models)}")
        elif self.kind is PipelineKind.SingleAgentRounds:
            if self.N != 1 or self.M != 1:
                raise PlanError("single-agent rounds require N = M = 1")
            if self.rounds is None:
                object.__setattr__(self, "rounds", 1)
            elif self.rounds < 1:
                raise PlanError("single-agent rounds require rounds >= 1")
        else:
            if self.rounds not in (None, 1):
                raise PlanError(f"{self.kind.value} pipelines have exactly 1 solving round")
            object.__setattr__(self, "rounds", 1)
        if self.kind is PipelineKind.Guided and not self.guide_path:
            raise PlanError("guided pipelines require guide_path")

    @property
    def final_model(self) -> str:
        return self.aggregator_model or self.solver_models[0]

    def solver_model(self, index: int) -> str:
        return self.solver_models[index % len(self.solver_models)]

    def label(self) -> str:
        if self.kind is PipelineKind.MoA:
            return f"MoA, R={self.R}, ({self.rounds} rounds)"
        if self.kind is PipelineKind.SingleAgentRounds:
            return f"Single agent, {self.rounds} rounds"
        return self.kind.value

    def snapshot(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "solver_models": list(self.solver_models),
            "aggregator_model": self.aggregator_model,
            "N": self.N,
            "M": self.M,
            "R": self.R,
            "rounds": self.rounds,
            "temperature": str(self.temperature),
            "guide_path": self.guide_path,
            "max_tokens": self.max_tokens,
            "thinking_budget": self.thinking_budget,
            "grammar_model": self.grammar_model,
            "kb_top_k": self.kb_top_k,
        }

    @classmethod
    def from_mapping(cls, d: Mapping[str, Any], parallelism: int | None = None) -> PipelineConfig:
        known = {"kind", "solver_models", "aggregator_model", "N", "M", "R", "rounds", "temperature",
                 "guide_path", "parallelism", "max_tokens", "thinking_budget", "grammar_model", "kb_top_k"}
        unknown = sorted(set(d) - known)
        if unknown:
            raise PlanError(f"unknown pipeline keys: {', '.join(unknown)}")
        if "kind" not in d:
            raise PlanError("pipeline.kind is required")
        models = d.get("solver_models", [])
        if isinstance(models, str):
            models = [models]
        kwargs = {k: v for k, v in d.items() if k != "solver_models"}
        if parallelism is not None:
            kwargs["parallelism"] = parallelism
        return cls(solver_models=tuple(models), **kwargs)


@dataclass(frozen=True)
class CallNode:
    node_id: str
    round_index: int
    role: AgentRole
    model_id: str
    inputs: tuple[str, ...] = ()
    seed: int = 0


@dataclass(frozen=True)
class CallGraph:
    nodes: tuple[CallNode, ...]

    def round(self, r: int) -> list[CallNode]:
        return sorted((n for n in self.nodes if n.round_index == r), key=lambda n: n.node_id)

    @property
    def solution_nodes(self) -> list[CallNode]:
        return [n for n in self.nodes if n.role is not AgentRole.GrammarAgent]

    @property
    def rounds(self) -> int:
        return max(n.round_index for n in self.solution_nodes)

    @property
    def final(self) -> CallNode:
        return self.round(self.rounds)[-1]

    def to_dict(self) -> list[dict[str, Any]]:
        return [
            {"node_id": n.node_id, "round": n.round_index, "role": n.role.value,
             "model_id": n.model_id, "inputs": list(n.inputs)}
            for n in self.nodes
        ]


def _node_id(round_index: int, role: AgentRole, idx: int) -> str:
    return f"r{round_index:02d}-{role.value}-{idx:02d}"


def plan_call_graph(cfg: PipelineConfig) -> CallGraph:
    """Lay out every LLM call of one problem, layered by round."""
    nodes: list[CallNode] = []
    prev: list[str] = []
    if cfg.kind is PipelineKind.MoA:
        for i in range(cfg.N):
            nodes.append(CallNode(_node_id(1, AgentRole.Solver, i), 1, AgentRole.Solver, cfg.solver_model(i), (), i))
        prev = [n.node_id for n in nodes]
        for r in range(2, cfg.R + 2):
            layer = [CallNode(_node_id(r, AgentRole.Aggregator, j), r, AgentRole.Aggregator,
                              cfg.final_model, tuple(prev), j) for j in range(cfg.M)]
            nodes.extend(layer)
            prev = [n.node_id for n in layer]
        last = cfg.R + 2
        nodes.append(CallNode(_node_id(last, AgentRole.FinalAggregator, 0), last, AgentRole.FinalAggregator,
                              cfg.final_model, tuple(prev), 0))
    elif cfg.kind is PipelineKind.SingleAgentRounds:
        model = cfg.solver_models[0]
        assert cfg.rounds is not None
        for r in range(1, cfg.rounds + 1):
            if r == 1:
                role = AgentRole.Solver
            elif r == cfg.rounds:
                role = AgentRole.FinalAggregator
            else:
                role = AgentRole.Aggregator
            node = CallNode(_node_id(r, role, 0), r, role, model, tuple(prev), 0)
            nodes.append(node)
            prev = [node.node_id]
    else:
        inputs: tuple[str, ...] = ()
        if cfg.kind is PipelineKind.GrammarRag:
            grammar = CallNode(_node_id(0, AgentRole.GrammarAgent, 0), 0, AgentRole.GrammarAgent,
                               cfg.grammar_model or cfg.solver_models[0])
            nodes.append(grammar)
            inputs = (grammar.node_id,)
        nodes.append(CallNode(_node_id(1, AgentRole.Solver, 0), 1, AgentRole.Solver, cfg.solver_models[0], inputs, 0))
    return CallGraph(tuple(nodes))


# -- prompts ----------------------------------------------------------------

def output_schema(problem: Problem) -> str:
    """JSON shape the final answer must take, listing this problem's answer ids."""
    lines = []
    for answer_id, spec in problem.answer_items():
        if spec.mode is AnswerMode.Select:
            hi = "any number of" if spec.select_max == float("inf") else f"at most {spec.select_max}"
            lines.append(f'    "{answer_id}": [...]   (list of {hi} strings, at least {spec.select_min})')
        else:
            lines.append(f'    "{answer_id}": ["..."]   (list with exactly one string)')
    return "{\n  \"answers\": {\n" + ",\n".join(lines) + "\n  },\n  \"explanation\": \"the rules you found\"\n}"


def format_instructions(problem: Problem) -> str:
    return (
        "Reason step by step. Then finish your reply with one JSON object of exactly this shape, "
        "filling every answer id:\n" + output_schema(problem)
    )


def problem_block(problem: Problem) -> str:
    tasks = "\n\n".join(f"### {sp.id}\n{sp.task_text}" for sp in problem.sub_problems)
    return f"## Problem\n{problem.statement}\n\n## Tasks\n{tasks}"


def solver_prompt(problem: Problem, brief: str | None = None) -> str:
    parts = []
    if brief:
        parts.append(f"## Grammar notes on {problem.annotation.language}\n{brief}")
    parts.append("Solve the following linguistics olympiad problem.")
    parts.append(problem_block(problem))
    parts.append(format_instructions(problem))
    return "\n\n".join(parts)


def aggregator_prompt(problem: Problem, solutions: Sequence[str]) -> str:
    shown = "\n\n".join(f"### Solution {i}\n{text}" for i, text in enumerate(solutions, 1))
    return "\n\n".join([
        f"You are given {len(solutions)} proposed solution(s) to a linguistics olympiad problem. "
        "Check them against the data, keep what is right, fix what is wrong, and write your own "
        "complete solution.",
        f"## Proposed solutions\n{shown}",
        problem_block(problem),
        format_instructions(problem),
    ])


# -- execution --------------------------------------------------------------

@dataclass
class NodeRun:
    node: CallNode
    text: str = ""
    finish_reason: str = ""
    status: str = "ok"
    attempts: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "node_id": self.node.node_id,
            "round": self.node.round_index,
            "role": self.node.role.value,
            "model_id": self.node.model_id,
            "inputs": list(self.node.inputs),
            "status": self.status,
            "finish_reason": self.finish_reason,
            "text": self.text,
        }


@dataclass
class PipelineResult:
    attempt: SolutionAttempt
    runs: list[NodeRun]
    flags: list[str] = field(default_factory=list)


def _parse_answers(text: str, schema: str) -> tuple[dict[str, list[str]], str]:
    obj = parse_structured_output(text, schema, expect="object")
    answers = obj.get("answers")
    if not isinstance(answers, Mapping):
        raise StructuredOutputError('JSON lacks an "answers" object', text)
    out: dict[str, list[str]] = {}
    for key, value in answers.items():
        if isinstance(value, str):
            out[str(key)] = [value]
        elif isinstance(value, list) and all(isinstance(v, (str, int, float)) for v in value):
            out[str(key)] = [str(v) for v in value]
        else:
            raise StructuredOutputError(f"answer {key!r} is not a string list", text)
    explanation = obj.get("explanation", "")
    if isinstance(explanation, list):
        explanation = "\n".join(map(str, explanation))
    return out, str(explanation)


class Pipeline:
    """Executes one planned call graph per problem through a gateway."""

    def __init__(self, cfg: PipelineConfig, gateway: Gateway, kb: KbIndex | None = None,
                 guide_text: str | None = None) -> None:
        self.cfg = cfg
        self.gateway = gateway
        self.kb = kb
        self.graph = plan_call_graph(cfg)
        if cfg.kind is PipelineKind.GrammarRag and kb is None:
            raise PlanError("grammar_rag pipelines need a knowledge base")
        if cfg.kind is PipelineKind.Guided and guide_text is None:
            assert cfg.guide_path is not None
            guide_text = Path(cfg.guide_path).read_text(encoding="utf-8")
        self.system_prompt = guide_text if cfg.kind is PipelineKind.Guided else None

    def _request(self, model: str, messages: Sequence[Message]) -> ChatRequest:
        return ChatRequest(model, tuple(messages), self.system_prompt, self.cfg.temperature,
                           self.cfg.thinking_budget, self.cfg.max_tokens)

    def _call(self, node: CallNode, prompt: str) -> tuple[NodeRun, ChatResponse]:
        req = self._request(node.model_id, [Message(Role.user, prompt)])
        try:
            resp = self.gateway.complete_chat(req, node.seed)
        except TransportError as exc:
            raise PipelineError(f"node {node.node_id}: {exc}") from exc
        run = NodeRun(node, resp.text, resp.finish_reason.value, "ok", int(resp.provider_meta.get("attempts", 0)))
        return run, resp

    def _grammar(self, problem: Problem, node: CallNode, flags: list[str]) -> tuple[NodeRun, str | None]:
        assert self.kb is not None
        hits = retrieve(problem, self.kb, self.cfg.kb_top_k)
        if not hits:
            flags.append("no_reference")
            return NodeRun(node, status="skipped"), None
        settings = GrammarSettings(node.model_id, top_k=self.cfg.kb_top_k)
        brief = summarize_grammar(problem, hits, self.gateway, settings)
        if brief is None:
            flags.append("grammar_unavailable")
            return NodeRun(node, status="failed"), None
        return NodeRun(node, brief, "stop"), brief

    def run(self, problem: Problem) -> PipelineResult:
        flags: list[str] = []
        runs: dict[str, NodeRun] = {}
        brief = None
        for node in self.graph.round(0):
            run, brief = self._grammar(problem, node, flags)
            runs[node.node_id] = run
        workers = max(1, min(self.cfg.parallelism, max(len(self.graph.round(r)) for r in range(1, self.graph.rounds + 1))))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for r in range(1, self.graph.rounds + 1):
                layer = self.graph.round(r)
                prompts = []
                for node in layer:
                    sol_inputs = [runs[i].text for i in sorted(node.inputs) if runs[i].node.role is not AgentRole.GrammarAgent]
                    if sol_inputs:
                        prompts.append(aggregator_prompt(problem, sol_inputs))
                    else:
                        prompts.append(solver_prompt(problem, brief))
                # Barrier: the whole layer finishes before the next one starts.
                for run, _ in pool.map(lambda np_: self._call(*np_), zip(layer, prompts)):
                    runs[run.node.node_id] = run
                if r == self.graph.rounds:
                    final_prompt = prompts[-1]
        final = self.graph.final
        attempt = self._finalize(problem, final, final_prompt, runs[final.node_id], flags)
        ordered = [runs[n.node_id] for n in self.graph.nodes]
        return PipelineResult(attempt, ordered, flags)

    def _finalize(self, problem: Problem, node: CallNode, prompt: str, run: NodeRun,
                  flags: list[str]) -> SolutionAttempt:
        schema = output_schema(problem)
        text = run.text
        try:
            answers, explanation = _parse_answers(text, schema)
            ok = True
        except StructuredOutputError:
            messages = [Message(Role.user, prompt), Message(Role.assistant, text),
                        Message(Role.user, repair_prompt(schema))]
            try:
                resp = self.gateway.complete_chat(self._request(node.model_id, messages), node.seed)
            except TransportError as exc:
                raise PipelineError(f"repair of {node.node_id}: {exc}") from exc
            flags.append("format_repair")
            try:
                answers, explanation = _parse_answers(resp.text, schema)
                ok = True
                text = f"{text}\n\n{resp.text}"
            except StructuredOutputError:
                answers, explanation, ok = {}, "", False
                flags.append("format_noncompliant")
        return SolutionAttempt(problem.key, answers, explanation, text, ok, reasoning=run.text,
                               flags=list(flags))


def run_pipeline(problem: Problem, cfg: PipelineConfig, gateway: Gateway,
                 kb: KbIndex | None = None) -> PipelineResult:
    return Pipeline(cfg, gateway, kb).run(problem)


# -- experiments ------------------------------------------------------------

class GatewayJudge:
    """Adapts the gateway to the grading judge interface (deterministic, temperature 0)."""

    def __init__(self, gateway: Gateway, model_id: str) -> None:
        self.gateway = gateway
        self.model_id = model_id

    def ask(self, prompt: str) -> str:
        return self.gateway.complete_chat(ChatRequest.single(self.model_id, prompt, temperature=0)).text


@dataclass
class ProblemResult:
    problem: Problem
    status: str  # graded | format_error | pipeline_error
    attempt: SolutionAttempt | None = None
    report: GradeReport | None = None
    runs: list[NodeRun] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)
    error: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "problem_ref": list(self.problem.key),
            "problem_id": self.problem.problem_id,
            "status": self.status,
            "annotation": annotation_to_dict(self.problem.annotation),
            "flags": list(self.flags),
            "error": self.error,
            "attempt": self.attempt.to_dict() if self.attempt else None,
            "report": self.report.to_dict() if self.report else None,
            "call_graph": [r.to_dict() for r in self.runs],
        }


@dataclass
class ExperimentRecord:
    pipeline: dict[str, Any]
    grading: dict[str, Any]
    label: str
    results: list[ProblemResult]

    @property
    def graded(self) -> list[ProblemResult]:
        return [r for r in self.results if r.status == "graded"]

    def bucket_counts(self) -> dict[str, int]:
        counts = {b.value: 0 for b in Bucket}
        for r in self.graded:
            assert r.report is not None
            counts[r.report.bucket.value] += 1
        return counts

    def average(self) -> Fraction | None:
        graded = self.graded
        if not graded:
            return None
        return sum((r.report.final_score for r in graded if r.report), Fraction(0)) / len(graded)

    def summary_row(self) -> dict[str, Any]:
        avg = self.average()
        return {
            "setting": self.label,
            "avg_score": format_score(avg) if avg is not None else "---",
            **self.bucket_counts(),
            "total": len(self.graded),
        }

    def to_dict(self) -> dict[str, Any]:
        avg = self.average()
        return {
            "format": 1,
            "label": self.label,
            "pipeline": self.pipeline,
            "grading": self.grading,
            "summary": self.summary_row(),
            "average": None if avg is None else {"value": format_score(avg), "exact": f"{avg.numerator}/{avg.denominator}"},
            "bucket_counts": self.bucket_counts(),
            "tallies": {
                "problems": len(self.results),
                "graded": len(self.graded),
                "ungraded": sum(r.status == "format_error" for r in self.results),
                "errors": sum(r.status == "pipeline_error" for r in self.results),
                "no_reference": sum("no_reference" in r.flags for r in self.results),
            },
            "results": [r.to_dict() for r in self.results],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=1, sort_keys=True) + "\n"


def _run_one(problem: Problem, pipeline: Pipeline, grading: GradingConfig, gateway: Gateway) -> ProblemResult:
    try:
        result = pipeline.run(problem)
    except PipelineError as exc:
        logger.error("problem %s failed: %s", problem.problem_id, exc)
        return ProblemResult(problem, "pipeline_error", flags=["pipeline_error"], error=str(exc))
    if not result.attempt.format_ok:
        return ProblemResult(problem, "format_error", result.attempt, None, result.runs, result.flags)
    judge = GatewayJudge(gateway, grading.judge_model) if grading.judge_model else None
    embed = None
    if grading.embedding_model:
        model = grading.embedding_model
        embed = lambda texts: gateway.embed_texts(texts, model)  # noqa: E731
    try:
        report = grade_attempt(result.attempt, problem, grading, judge, embed=embed)
    except TransportError as exc:
        logger.error("grading %s failed: %s", problem.problem_id, exc)
        return ProblemResult(problem, "pipeline_error", result.attempt, None, result.runs,
                             result.flags + ["grading_error"], str(exc))
    return ProblemResult(problem, "graded", result.attempt, report, result.runs, result.flags)


def run_experiment(problems: Iterable[Problem], cfg: PipelineConfig, grading: GradingConfig,
                   gateway: Gateway, kb: KbIndex | None = None) -> ExperimentRecord:
    """Solve and grade every problem; results come back in (year, number) order."""
    ordered = sorted(problems, key=lambda p: p.key)
    if not ordered:
        raise ValueError("run_experiment needs at least one problem")
    pipeline = Pipeline(cfg, gateway, kb)
    with ThreadPoolExecutor(max_workers=min(cfg.parallelism, len(ordered))) as pool:
        results = list(pool.map(lambda p: _run_one(p, pipeline, grading, gateway), ordered))
    return ExperimentRecord(cfg.snapshot(), grading.snapshot(), cfg.label(), results)
