"""Split Markdown into heading-aware chunks under a token budget."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable, Protocol

HEADING_RE = re.compile(r"^(#{1,6})[ \t]+(.+?)[ \t#]*$")
FENCE_RE = re.compile(r"^(`{3,}|~{3,})")
HEADER_SEP = " > "

DEFAULT_BUDGET = 256


class Tokenizer(Protocol):
    def count(self, text: str) -> int: ...


class WhitespaceTokenizer:
    """Counts whitespace-delimited units."""

    def count(self, text: str) -> int:
        return len(text.split())


class FunctionTokenizer:
    """Adapts any ``str -> int`` callable, e.g. ``lambda s: len(tok.encode(s))``."""

    def __init__(self, fn: Callable[[str], int]) -> None:
        self.fn = fn

    def count(self, text: str) -> int:
        return int(self.fn(text))


class ChunkingError(ValueError):
    pass


@dataclass(frozen=True)
class Section:
    path: tuple[str, ...]
    body: str


@dataclass(frozen=True)
class TextChunk:
    context_header: str
    text: str
    token_count: int

    @property
    def embed_text(self) -> str:
        return embed_text(self.context_header, self.text)


def embed_text(header: str, text: str) -> str:
    return f"{header}\n\n{text}" if header else text


def split_sections(markdown: str) -> list[Section]:
    """Cut at ATX headings, tracking the title path; fenced code is opaque."""
    sections: list[Section] = []
    path: list[tuple[int, str]] = []
    lines: list[str] = []
    fence: str | None = None

    def flush() -> None:
        body = "\n".join(lines).strip()
        if body:
            sections.append(Section(tuple(t for _, t in path), body))
        lines.clear()

    for line in markdown.splitlines():
        m = FENCE_RE.match(line.strip())
        if m:
            marker = m.group(1)[0] * 3
            if fence is None:
                fence = marker
            elif marker == fence:
                fence = None
            lines.append(line)
            continue
        h = HEADING_RE.match(line) if fence is None else None
        if h is None:
            lines.append(line)
            continue
        flush()
        level = len(h.group(1))
        while path and path[-1][0] >= level:
            path.pop()
        path.append((level, h.group(2).strip()))
    flush()
    return sections


def _paragraphs(body: str) -> list[str]:
    return [p.strip() for p in re.split(r"\n[ \t]*\n", body) if p.strip()]


def _fits(header: str, text: str, tokenizer: Tokenizer, budget: int) -> tuple[bool, int]:
    n = tokenizer.count(embed_text(header, text))
    return n <= budget, n


def _split_words(header: str, paragraph: str, tokenizer: Tokenizer, budget: int) -> list[str]:
    """Greedy word windows, each the longest prefix that still fits."""
    words = paragraph.split()
    pieces = []
    start = 0
    while start < len(words):
        lo, hi = start + 1, len(words)
        if not _fits(header, words[start], tokenizer, budget)[0]:
            raise ChunkingError(f"a single word does not fit the {budget}-token budget: {words[start][:40]!r}")
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if _fits(header, " ".join(words[start:mid]), tokenizer, budget)[0]:
                lo = mid
            else:
                hi = mid - 1
        pieces.append(" ".join(words[start:lo]))
        start = lo
    return pieces


def chunk_markdown(markdown: str, tokenizer: Tokenizer | None = None,
                   budget: int = DEFAULT_BUDGET) -> list[TextChunk]:
    """Chunk a document section by section.

    Paragraphs are packed greedily; a paragraph that alone overflows the
    budget is cut into word windows. The budget covers the header too, since
    header and text are embedded together.
    """
    tokenizer = tokenizer or WhitespaceTokenizer()
    if budget < 1:
        raise ValueError("budget must be positive")
    chunks: list[TextChunk] = []
    for section in split_sections(markdown):
        header = HEADER_SEP.join(section.path)
        current = ""
        units: list[str] = []
        for para in _paragraphs(section.body):
            if _fits(header, para, tokenizer, budget)[0]:
                units.append(para)
            else:
                units.extend(_split_words(header, para, tokenizer, budget))
        for unit in units:
            candidate = f"{current}\n\n{unit}" if current else unit
            if _fits(header, candidate, tokenizer, budget)[0]:
                current = candidate
                continue
            chunks.append(_make(header, current, tokenizer))
            current = unit
        if current:
            chunks.append(_make(header, current, tokenizer))
    return chunks


def _make(header: str, text: str, tokenizer: Tokenizer) -> TextChunk:
    return TextChunk(header, text, tokenizer.count(embed_text(header, text)))
