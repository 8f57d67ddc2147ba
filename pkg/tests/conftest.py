from __future__ import annotations

import sys
from pathlib import Path

import pytest

TESTS = Path(__file__).resolve().parent
FIXTURES = TESTS / "fixtures"
sys.path.insert(0, str(TESTS))

from olyharness.problem_model import (  # noqa: E402
    AnswerSpec,
    Problem,
    ProblemType,
    SubProblem,
    Subject,
    Theme,
    TypologyAnnotation,
)


def make_annotation(**overrides) -> TypologyAnnotation:
    fields = dict(subjects=frozenset({Subject.Morphology}), type=ProblemType.Rosetta,
                  themes=frozenset({Theme.NoTheme}), language="Finnish", language_family="Uralic",
                  glottocode="finn1318", speakers=5_000_000)
    fields.update(overrides)
    return TypologyAnnotation(**fields)


def make_problem(specs: dict[str, list[AnswerSpec]] | None = None, checklist=("rule one", "rule two"),
                 year: int = 2000, number: int = 1, **annotation) -> Problem:
    specs = specs or {"1": [AnswerSpec.from_tag(None, ["kasvosta"])]}
    subs = tuple(SubProblem(k, f"task {k}", tuple(v)) for k, v in specs.items())
    return Problem(year, number, "statement", subs, tuple(checklist), "gold reasoning",
                   make_annotation(**annotation))


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


def hash_embedder(dim: int = 64):
    """Embedder over the deterministic hash stub, routed through a Gateway."""
    from olyharness.llm import Gateway, HashEmbeddingProvider

    gateway = Gateway(embedding_providers={"stub": HashEmbeddingProvider(dim)})
    return lambda texts: gateway.embed_texts(list(texts), "stub/hash")


def build_fixture_index(directory: Path, embedder=None):
    """Index the five fixture grammars."""
    from olyharness.kb import KbIndex, read_manifest

    index = KbIndex(directory, embedder)
    for doc in read_manifest(FIXTURES / "grammars" / "manifest.jsonl"):
        index.ingest(doc)
    return index


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
