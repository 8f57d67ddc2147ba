"""Grammar Agent: retrieve reference-grammar chunks and condense them into a brief."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

from ..llm.gateway import ChatRequest, Gateway, TransportError
from ..problem_model import Problem
from .index import KbIndex, SearchFilters, SearchHit, SearchMode, SearchQuery

logger = logging.getLogger(__name__)

QUERY_HEAD_WORDS = 40

SUMMARY_PROMPT = """You are assisting a solver of a linguistics olympiad problem about {language}.
Below are excerpts from reference grammars of {language}. Summarize the grammatical features
that could help with the problem: phonology, morphology, word order, number systems or anything
else the problem touches. Be concise and factual; do not attempt to solve the problem.

## Problem
{statement}

## Grammar excerpts
{excerpts}
"""


def grammar_query(problem: Problem) -> str:
    """Language name followed by the opening words of the statement."""
    head = " ".join(problem.statement.split()[:QUERY_HEAD_WORDS])
    return f"{problem.annotation.language} {head}".strip()


def retrieve(problem: Problem, index: KbIndex, top_k: int = 5) -> list[SearchHit]:
    mode = SearchMode.Hybrid if index.embedder is not None else SearchMode.FullText
    query = SearchQuery(grammar_query(problem), mode,
                        SearchFilters(glottocodes=frozenset({problem.annotation.glottocode})), top_k)
    return index.search(query)


def _format_excerpts(hits: Sequence[SearchHit]) -> str:
    parts = []
    for n, hit in enumerate(hits, 1):
        header = hit.chunk.context_header or hit.chunk.metadata.get("title", "")
        parts.append(f"[{n}] {header}\n{hit.chunk.text}")
    return "\n\n".join(parts)


@dataclass(frozen=True)
class GrammarSettings:
    model_id: str
    max_tokens: int = 512
    temperature: float = 0.0
    top_k: int = 5


def summarize_grammar(problem: Problem, hits: Sequence[SearchHit], gateway: Gateway,
                      settings: GrammarSettings, run_seed: int = 0) -> str | None:
    """One chat call over the hits; None when there is nothing to summarize or the call fails."""
    if not hits:
        return None
    prompt = SUMMARY_PROMPT.format(
        language=problem.annotation.language,
        statement=problem.statement,
        excerpts=_format_excerpts(hits),
    )
    req = ChatRequest.single(settings.model_id, prompt, temperature=settings.temperature,
                             max_tokens=settings.max_tokens)
    try:
        resp = gateway.complete_chat(req, run_seed)
    except TransportError as exc:
        logger.warning("grammar summary for %s failed: %s", problem.problem_id, exc)
        return None
    words = resp.text.split()
    if not words:
        return None
    return " ".join(words[:settings.max_tokens]) if len(words) > settings.max_tokens else resp.text.strip()
