"""Reference-grammar knowledge base."""

from .chunking import FunctionTokenizer, Tokenizer, WhitespaceTokenizer, chunk_markdown
from .index import (
    IngestionError,
    KbChunk,
    KbDocument,
    KbIndex,
    SearchFilters,
    SearchHit,
    SearchMode,
    SearchQuery,
    read_manifest,
    rrf_fuse,
)

__all__ = [
    "FunctionTokenizer", "Tokenizer", "WhitespaceTokenizer", "chunk_markdown",
    "IngestionError", "KbChunk", "KbDocument", "KbIndex", "SearchFilters", "SearchHit",
    "SearchMode", "SearchQuery", "read_manifest", "rrf_fuse",
]
