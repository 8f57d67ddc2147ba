"""Provider-agnostic chat and embedding client with a replayable disk cache."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import tempfile
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol, Sequence, TypeVar

import numpy as np

logger = logging.getLogger(__name__)

T = TypeVar("T")


class Role(str, enum.Enum):
    user = "user"
    assistant = "assistant"


class FinishReason(str, enum.Enum):
    stop = "stop"
    length = "length"
    filter = "filter"
    error = "error"


@dataclass(frozen=True)
class Message:
    role: Role
    content: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "role", Role(self.role))


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    messages: tuple[Message, ...]
    system_prompt: str | None = None
    temperature: float = 0.0
    thinking_budget: int | None = None
    max_tokens: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple(self.messages))
        if not self.messages:
            raise ValueError("chat request needs at least one message")
        if not (self.temperature >= 0 and self.temperature != float("inf")):
            raise ValueError(f"temperature must be finite and >= 0, got {self.temperature}")
        if self.thinking_budget is not None and self.thinking_budget < 0:
            raise ValueError("thinking_budget must be nonnegative")
        if self.max_tokens is not None and self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")

    @classmethod
    def single(cls, model_id: str, prompt: str, **kwargs: Any) -> ChatRequest:
        return cls(model_id, (Message(Role.user, prompt),), **kwargs)

    def to_dict(self) -> dict[str, Any]:
        return {
            "model_id": self.model_id,
            "system_prompt": self.system_prompt,
            "messages": [{"role": m.role.value, "content": m.content} for m in self.messages],
            "temperature": float(self.temperature),
            "thinking_budget": self.thinking_budget,
            "max_tokens": self.max_tokens,
        }


@dataclass(frozen=True)
class ChatResponse:
    text: str
    finish_reason: FinishReason = FinishReason.stop
    provider_meta: Mapping[str, Any] = field(default_factory=dict)
    cached: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "finish_reason", FinishReason(self.finish_reason))

    def to_dict(self) -> dict[str, Any]:
        return {
            "text": self.text,
            "finish_reason": self.finish_reason.value,
            "provider_meta": dict(self.provider_meta),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], cached: bool = False) -> ChatResponse:
        return cls(d["text"], FinishReason(d["finish_reason"]), dict(d.get("provider_meta", {})), cached)


class TransportError(RuntimeError):
    """A provider call failed; ``status`` is the HTTP status when there was one."""

    def __init__(self, message: str, status: int | None = None, retriable: bool = True) -> None:
        super().__init__(message)
        self.status = status
        self.retriable = retriable


class IntegrityError(RuntimeError):
    pass


class ChatProvider(Protocol):
    def chat(self, req: ChatRequest) -> ChatResponse: ...


class EmbeddingProvider(Protocol):
    def embed(self, texts: Sequence[str], model: str) -> list[list[float]]: ...


def _digest(payload: Mapping[str, Any]) -> str:
    blob = json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def cache_key(req: ChatRequest, run_seed: int = 0) -> str:
    """SHA-256 over every request field plus the run seed."""
    return _digest({"kind": "chat", "request": req.to_dict(), "run_seed": run_seed})


def embedding_key(text: str, model_id: str) -> str:
    return _digest({"kind": "embedding", "model_id": model_id, "text": text})


class ResponseCache:
    """Content-addressed store: ``<dir>/<first 2 hex>/<digest>.json``.

    Writes go to a temp file in the target directory and are renamed into
    place, so concurrent readers never see a partial entry.
    """

    def __init__(self, cache_dir: str | Path) -> None:
        self.dir = Path(cache_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def path_for(self, key: str) -> Path:
        return self.dir / key[:2] / f"{key}.json"

    def _read(self, key: str) -> dict[str, Any] | None:
        path = self.path_for(key)
        try:
            entry = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            entry = None
        with self._lock:
            if entry is None:
                self.misses += 1
            else:
                self.hits += 1
        return entry

    def _write(self, key: str, entry: Mapping[str, Any]) -> None:
        path = self.path_for(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(entry, fh, ensure_ascii=False, indent=1, sort_keys=True)
            os.replace(tmp, path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise

    def get_chat(self, key: str) -> ChatResponse | None:
        entry = self._read(key)
        return ChatResponse.from_dict(entry["response"], cached=True) if entry else None

    def put_chat(self, key: str, req: ChatRequest, resp: ChatResponse, run_seed: int) -> None:
        now = time.time()
        self._write(key, {
            "kind": "chat",
            "request": req.to_dict(),
            "run_seed": run_seed,
            "response": resp.to_dict(),
            "created_at": now,
        })

    def get_embedding(self, key: str) -> list[float] | None:
        entry = self._read(key)
        return entry["vector"] if entry else None

    def put_embedding(self, key: str, text: str, model_id: str, vector: Sequence[float]) -> None:
        self._write(key, {
            "kind": "embedding",
            "model_id": model_id,
            "text": text,
            "vector": [float(v) for v in vector],
            "created_at": time.time(),
        })

    def stats(self) -> dict[str, int]:
        with self._lock:
            return {"hits": self.hits, "misses": self.misses}


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    backoff: tuple[float, ...] = (1.0, 4.0)
    sleep: Callable[[float], None] = time.sleep

    def delay(self, failures: int) -> float:
        if not self.backoff:
            return 0.0
        return self.backoff[min(failures - 1, len(self.backoff) - 1)]


class Gateway:
    """Routes requests to providers, enforcing cache, retries and a parallelism cap.

    ``chat_providers`` and ``embedding_providers`` map a provider name to a
    provider; a model id ``"<name>/<model>"`` selects provider ``<name>``. A
    provider registered as ``"default"`` receives ids with no matching prefix.
    """

    def __init__(
        self,
        chat_providers: Mapping[str, ChatProvider] | None = None,
        embedding_providers: Mapping[str, EmbeddingProvider] | None = None,
        cache: ResponseCache | None = None,
        policy: RetryPolicy = RetryPolicy(),
        parallelism: int = 8,
    ) -> None:
        self.chat_providers = dict(chat_providers or {})
        self.embedding_providers = dict(embedding_providers or {})
        self.cache = cache
        self.policy = policy
        self._slots = threading.BoundedSemaphore(max(1, parallelism))
        self._lock = threading.Lock()
        self._key_locks: dict[str, threading.Lock] = defaultdict(threading.Lock)
        self.network_calls = 0

    @staticmethod
    def _route(model_id: str, providers: Mapping[str, Any]) -> tuple[Any, str]:
        name, sep, model = model_id.partition("/")
        if sep and name in providers:
            return providers[name], model
        if "default" in providers:
            return providers["default"], model_id
        raise TransportError(f"no provider configured for model {model_id!r}", retriable=False)

    def _key_lock(self, key: str) -> threading.Lock:
        with self._lock:
            return self._key_locks[key]

    def _count_call(self) -> None:
        with self._lock:
            self.network_calls += 1

    def complete_chat(self, req: ChatRequest, run_seed: int = 0) -> ChatResponse:
        key = cache_key(req, run_seed)
        with self._key_lock(key):
            if self.cache is not None:
                hit = self.cache.get_chat(key)
                if hit is not None:
                    return hit
            provider, model = self._route(req.model_id, self.chat_providers)
            wire_req = ChatRequest(model, req.messages, req.system_prompt, req.temperature,
                                   req.thinking_budget, req.max_tokens)
            raw, attempts = self._with_retries(lambda: provider.chat(wire_req), req.model_id)
            resp = ChatResponse(raw.text, raw.finish_reason, {**raw.provider_meta, "attempts": attempts})
            if self.cache is not None:
                self.cache.put_chat(key, req, resp, run_seed)
            return resp

    def _with_retries(self, call: Callable[[], T], label: str) -> tuple[T, int]:
        last: TransportError | None = None
        for attempt in range(1, self.policy.max_attempts + 1):
            self._count_call()
            try:
                with self._slots:
                    return call(), attempt
            except TransportError as exc:
                last = exc
                logger.warning("%s attempt %d/%d failed: %s", label, attempt, self.policy.max_attempts, exc)
                if not exc.retriable or attempt == self.policy.max_attempts:
                    break
                self.policy.sleep(self.policy.delay(attempt))
        assert last is not None
        raise TransportError(f"{label}: all attempts failed: {last}", status=last.status, retriable=False)

    def embed_texts(self, texts: Sequence[str], model_id: str) -> list[np.ndarray]:
        """One L2-normalized vector per text; cached per (model, text)."""
        if not texts:
            raise ValueError("embed_texts needs at least one text")
        vectors: list[Sequence[float] | None] = [None] * len(texts)
        missing: list[int] = []
        for i, text in enumerate(texts):
            cached = self.cache.get_embedding(embedding_key(text, model_id)) if self.cache else None
            if cached is None:
                missing.append(i)
            else:
                vectors[i] = cached
        if missing:
            provider, model = self._route(model_id, self.embedding_providers)
            batch = [texts[i] for i in missing]
            fresh, _ = self._with_retries(lambda: provider.embed(batch, model), model_id)
            if len(fresh) != len(batch):
                raise IntegrityError(f"provider returned {len(fresh)} vectors for {len(batch)} texts")
            for i, vec in zip(missing, fresh):
                vectors[i] = vec
                if self.cache is not None:
                    self.cache.put_embedding(embedding_key(texts[i], model_id), texts[i], model_id, vec)
        dims = {len(v) for v in vectors}
        if len(dims) != 1:
            raise IntegrityError(f"embedding dimensions differ within batch: {sorted(dims)}")
        out = []
        for v in vectors:
            arr = np.asarray(v, dtype=np.float64)
            norm = float(np.linalg.norm(arr))
            if norm == 0.0:
                raise IntegrityError("provider returned a zero vector")
            out.append(arr / norm)
        return out

    def stats(self) -> dict[str, int]:
        s = self.cache.stats() if self.cache else {"hits": 0, "misses": 0}
        s["network_calls"] = self.network_calls
        return s
