"""Persistent grammar index with BM25, vector and hybrid (RRF) search."""

from __future__ import annotations

import enum
import json
import logging
import math
import os
import re
import tempfile
import threading
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np
from filelock import FileLock

from ..problem_model import GLOTTOCODE_RE
from .chunking import DEFAULT_BUDGET, Tokenizer, WhitespaceTokenizer, chunk_markdown, embed_text

logger = logging.getLogger(__name__)

BM25_K1 = 1.2
BM25_B = 0.75
RRF_K = 60
MANIFEST = "manifest.json"

Embedder = Callable[[Sequence[str]], Sequence[np.ndarray]]

_TOKEN_RE = re.compile(r"\w+", re.UNICODE)


def lexical_tokens(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.casefold())


class IngestionError(RuntimeError):
    pass


@dataclass(frozen=True)
class KbDocument:
    doc_id: str
    title: str
    glottocode: str
    family: str
    languoid_name: str
    macroareas: frozenset[str]
    countries: frozenset[str]
    body_markdown: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "macroareas", frozenset(self.macroareas))
        object.__setattr__(self, "countries", frozenset(self.countries))
        if not self.doc_id:
            raise ValueError("doc_id must be nonempty")
        if not GLOTTOCODE_RE.fullmatch(self.glottocode):
            raise ValueError(f"document {self.doc_id}: invalid glottocode {self.glottocode!r}")

    def metadata(self) -> dict[str, Any]:
        return {
            "doc_id": self.doc_id,
            "title": self.title,
            "glottocode": self.glottocode,
            "family": self.family,
            "languoid_name": self.languoid_name,
            "macroareas": sorted(self.macroareas),
            "countries": sorted(self.countries),
        }


def read_manifest(path: str | Path) -> list[KbDocument]:
    """Load an ingestion manifest: JSON lines with a ``path`` to each Markdown body."""
    path = Path(path)
    docs = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            body = (path.parent / rec["path"]).read_text(encoding="utf-8")
            docs.append(KbDocument(
                doc_id=rec["doc_id"],
                title=rec.get("title", rec["doc_id"]),
                glottocode=rec["glottocode"],
                family=rec.get("family", ""),
                languoid_name=rec.get("languoid_name", ""),
                macroareas=frozenset(rec.get("macroareas", [])),
                countries=frozenset(rec.get("countries", [])),
                body_markdown=body,
            ))
        except (KeyError, ValueError, OSError) as exc:
            raise IngestionError(f"{path}:{lineno}: {exc}") from exc
    return docs


@dataclass(frozen=True)
class KbChunk:
    chunk_id: str
    doc_id: str
    context_header: str
    text: str
    token_count: int
    metadata: Mapping[str, Any]
    embedding: np.ndarray | None = field(default=None, compare=False, repr=False)

    @property
    def glottocode(self) -> str:
        return self.metadata["glottocode"]

    @property
    def embed_text(self) -> str:
        return embed_text(self.context_header, self.text)

    def to_dict(self) -> dict[str, Any]:
        return {
            "chunk_id": self.chunk_id,
            "doc_id": self.doc_id,
            "context_header": self.context_header,
            "text": self.text,
            "token_count": self.token_count,
            "metadata": dict(self.metadata),
        }


class SearchMode(str, enum.Enum):
    FullText = "fulltext"
    Vector = "vector"
    Hybrid = "hybrid"


@dataclass(frozen=True)
class SearchFilters:
    glottocodes: frozenset[str] | None = None
    families: frozenset[str] | None = None
    macroareas: frozenset[str] | None = None
    countries: frozenset[str] | None = None

    def accepts(self, meta: Mapping[str, Any]) -> bool:
        if self.glottocodes is not None and meta["glottocode"] not in self.glottocodes:
            return False
        if self.families is not None and meta["family"] not in self.families:
            return False
        if self.macroareas is not None and not self.macroareas & set(meta["macroareas"]):
            return False
        if self.countries is not None and not self.countries & set(meta["countries"]):
            return False
        return True


@dataclass(frozen=True)
class SearchQuery:
    text: str
    mode: SearchMode = SearchMode.Hybrid
    filters: SearchFilters = SearchFilters()
    top_k: int = 5

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", SearchMode(self.mode))
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")


@dataclass(frozen=True)
class SearchHit:
    chunk: KbChunk
    score: float


def rrf_fuse(rankings: Iterable[Sequence[str]], k: int = RRF_K) -> list[tuple[str, Fraction]]:
    """Reciprocal-rank fusion, exact; ties go to the smaller id."""
    scores: dict[str, Fraction] = {}
    for ranking in rankings:
        for rank, item in enumerate(ranking, 1):
            scores[item] = scores.get(item, Fraction(0)) + Fraction(1, k + rank)
    return sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


class KbIndex:
    """Directory-backed index: ``manifest.json`` plus one ``.npy`` vector file.

    All chunks are held in memory. Mutations take an exclusive file lock on
    the directory and rewrite the store atomically, so a failed ingestion
    leaves both memory and disk as they were.
    """

    def __init__(self, directory: str | Path, embedder: Embedder | None = None,
                 tokenizer: Tokenizer | None = None, budget: int = DEFAULT_BUDGET) -> None:
        self.dir = Path(directory)
        self.embedder = embedder
        self.tokenizer = tokenizer or WhitespaceTokenizer()
        self.budget = budget
        self._lock = threading.RLock()
        self.documents: dict[str, dict[str, Any]] = {}
        self.chunks: list[KbChunk] = []
        self.dir.mkdir(parents=True, exist_ok=True)
        self._file_lock = FileLock(str(self.dir / ".write.lock"))
        self._load()

    def _load(self) -> None:
        manifest = self.dir / MANIFEST
        if not manifest.exists():
            return
        data = json.loads(manifest.read_text(encoding="utf-8"))
        vectors = None
        if data.get("vectors_file"):
            vectors = np.load(self.dir / data["vectors_file"])
        self.documents = dict(data["documents"])
        chunks = []
        for i, rec in enumerate(data["chunks"]):
            vec = vectors[i] if vectors is not None else None
            chunks.append(KbChunk(rec["chunk_id"], rec["doc_id"], rec["context_header"], rec["text"],
                                  rec["token_count"], rec["metadata"], vec))
        self.chunks = chunks
        self._rebuild_stats()

    def _persist(self, documents: dict[str, dict[str, Any]], chunks: list[KbChunk]) -> None:
        old = None
        manifest_path = self.dir / MANIFEST
        if manifest_path.exists():
            old = json.loads(manifest_path.read_text(encoding="utf-8")).get("vectors_file")
        vectors_file = None
        if chunks and all(c.embedding is not None for c in chunks):
            generation = 0 if old is None else int(old.split("-")[1].split(".")[0]) + 1
            vectors_file = f"vectors-{generation:06d}.npy"
            buf = self.dir / vectors_file
            tmp = buf.with_name(f".tmp-{vectors_file}")
            np.save(tmp, np.stack([c.embedding for c in chunks]))
            os.replace(tmp, buf)
        payload = {
            "format": 1,
            "budget": self.budget,
            "documents": documents,
            "chunks": [c.to_dict() for c in chunks],
            "vectors_file": vectors_file,
        }
        blob = json.dumps(payload, ensure_ascii=False, indent=1, sort_keys=True).encode("utf-8")
        _atomic_write_bytes(manifest_path, blob)
        if old and old != vectors_file:
            (self.dir / old).unlink(missing_ok=True)

    def _rebuild_stats(self) -> None:
        self._tokens = [Counter(lexical_tokens(c.embed_text)) for c in self.chunks]
        self._lengths = [sum(t.values()) for t in self._tokens]
        self._avgdl = (sum(self._lengths) / len(self._lengths)) if self._lengths else 0.0
        df: Counter[str] = Counter()
        for t in self._tokens:
            df.update(t.keys())
        self._df = df

    def ingest(self, doc: KbDocument) -> list[str]:
        """Chunk, embed and store ``doc``, replacing any earlier version."""
        if not doc.body_markdown.strip():
            raise IngestionError(f"document {doc.doc_id} has an empty body")
        with self._lock, self._file_lock:
            try:
                pieces = chunk_markdown(doc.body_markdown, self.tokenizer, self.budget)
            except Exception as exc:
                raise IngestionError(f"document {doc.doc_id}: chunking failed: {exc}") from exc
            vectors: Sequence[np.ndarray | None] = [None] * len(pieces)
            if pieces and self.embedder is not None:
                try:
                    vectors = list(self.embedder([p.embed_text for p in pieces]))
                except Exception as exc:
                    raise IngestionError(f"document {doc.doc_id}: embedding failed: {exc}") from exc
            meta = doc.metadata()
            new_chunks = [
                KbChunk(f"{doc.doc_id}:{i:04d}", doc.doc_id, p.context_header, p.text, p.token_count, meta,
                        None if v is None else np.asarray(v, dtype=np.float64))
                for i, (p, v) in enumerate(zip(pieces, vectors))
            ]
            chunks = [c for c in self.chunks if c.doc_id != doc.doc_id] + new_chunks
            chunks.sort(key=lambda c: c.chunk_id)
            documents = {**self.documents, doc.doc_id: meta}
            self._persist(documents, chunks)
            self.documents, self.chunks = documents, chunks
            self._rebuild_stats()
            logger.info("ingested %s: %d chunks", doc.doc_id, len(new_chunks))
            return [c.chunk_id for c in new_chunks]

    def _bm25(self, query_terms: list[str], candidates: list[int]) -> list[tuple[int, float]]:
        n_docs = len(self.chunks)
        terms = sorted(set(query_terms))
        out = []
        for i in candidates:
            tf = self._tokens[i]
            if not any(t in tf for t in terms):
                continue
            norm = BM25_K1 * (1 - BM25_B + BM25_B * self._lengths[i] / self._avgdl)
            score = 0.0
            for t in terms:
                f = tf.get(t, 0)
                if not f:
                    continue
                idf = math.log(1 + (n_docs - self._df[t] + 0.5) / (self._df[t] + 0.5))
                score += idf * f * (BM25_K1 + 1) / (f + norm)
            out.append((i, score))
        return out

    def _cosine(self, query: str, candidates: list[int]) -> list[tuple[int, float]]:
        if self.embedder is None:
            raise ValueError("vector search needs an embedding provider")
        if any(self.chunks[i].embedding is None for i in candidates):
            raise ValueError("index contains chunks without embeddings")
        q = np.asarray(self.embedder([query])[0], dtype=np.float64)
        return [(i, float(np.dot(self.chunks[i].embedding, q))) for i in candidates]

    def _ranked(self, scored: list[tuple[int, float]]) -> list[tuple[int, float]]:
        return sorted(scored, key=lambda s: (-s[1], self.chunks[s[0]].chunk_id))

    def search(self, q: SearchQuery) -> list[SearchHit]:
        if not q.text.strip():
            raise ValueError("query text must be nonempty")
        with self._lock:
            candidates = [i for i, c in enumerate(self.chunks) if q.filters.accepts(c.metadata)]
            if not candidates:
                return []
            if q.mode is SearchMode.FullText:
                ranked = self._ranked(self._bm25(lexical_tokens(q.text), candidates))
                return [SearchHit(self.chunks[i], s) for i, s in ranked[:q.top_k]]
            if q.mode is SearchMode.Vector:
                ranked = self._ranked(self._cosine(q.text, candidates))
                return [SearchHit(self.chunks[i], s) for i, s in ranked[:q.top_k]]
            lexical = self._ranked(self._bm25(lexical_tokens(q.text), candidates))
            semantic = self._ranked(self._cosine(q.text, candidates))
            by_id = {c.chunk_id: c for c in self.chunks}
            fused = rrf_fuse([[self.chunks[i].chunk_id for i, _ in lexical],
                              [self.chunks[i].chunk_id for i, _ in semantic]])
            return [SearchHit(by_id[cid], float(score)) for cid, score in fused[:q.top_k]]

    def __len__(self) -> int:
        return len(self.chunks)
