"""Concrete chat/embedding providers and the TOML provider registry."""

from __future__ import annotations

import hashlib
import os
import sys
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import httpx

from .gateway import ChatRequest, ChatResponse, FinishReason, Gateway, ResponseCache, RetryPolicy, TransportError

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

_FINISH_MAP = {
    "stop": FinishReason.stop,
    "end_turn": FinishReason.stop,
    "length": FinishReason.length,
    "max_tokens": FinishReason.length,
    "content_filter": FinishReason.filter,
    "safety": FinishReason.filter,
}


def map_finish_reason(raw: str | None) -> FinishReason:
    if raw is None:
        return FinishReason.stop
    return _FINISH_MAP.get(raw.lower(), FinishReason.error)


class OpenAICompatibleProvider:
    """Speaks the common ``/chat/completions`` and ``/embeddings`` HTTP shape."""

    def __init__(self, base_url: str, auth_env: str | None = None, *, timeout: float = 120.0,
                 client: httpx.Client | None = None) -> None:
        self.base_url = base_url.rstrip("/")
        self.auth_env = auth_env
        self._client = client or httpx.Client(timeout=timeout)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.auth_env:
            token = os.environ.get(self.auth_env)
            if not token:
                raise TransportError(f"environment variable {self.auth_env} is not set", retriable=False)
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def _post(self, path: str, body: Mapping[str, Any]) -> dict[str, Any]:
        try:
            resp = self._client.post(f"{self.base_url}{path}", json=body, headers=self._headers())
        except httpx.HTTPError as exc:
            raise TransportError(f"{path}: {exc}") from exc
        if resp.status_code >= 400:
            retriable = resp.status_code == 429 or resp.status_code >= 500
            raise TransportError(f"{path}: HTTP {resp.status_code}: {resp.text[:200]}",
                                 status=resp.status_code, retriable=retriable)
        try:
            return resp.json()
        except ValueError as exc:
            raise TransportError(f"{path}: response is not JSON", status=resp.status_code) from exc

    def chat(self, req: ChatRequest) -> ChatResponse:
        messages = []
        if req.system_prompt is not None:
            messages.append({"role": "system", "content": req.system_prompt})
        messages.extend({"role": m.role.value, "content": m.content} for m in req.messages)
        body: dict[str, Any] = {"model": req.model_id, "messages": messages, "temperature": float(req.temperature)}
        if req.max_tokens is not None:
            body["max_tokens"] = req.max_tokens
        if req.thinking_budget is not None:
            body["thinking_budget"] = req.thinking_budget
        data = self._post("/chat/completions", body)
        choices = data.get("choices") or []
        if not choices:
            # Some providers answer a refusal with no choices at all.
            return ChatResponse("", FinishReason.filter, {"model": data.get("model")})
        choice = choices[0]
        text = (choice.get("message") or {}).get("content") or ""
        meta = {"model": data.get("model"), "usage": data.get("usage")}
        return ChatResponse(text, map_finish_reason(choice.get("finish_reason")), meta)

    def embed(self, texts: Sequence[str], model: str) -> list[list[float]]:
        data = self._post("/embeddings", {"model": model, "input": list(texts)})
        rows = sorted(data.get("data", []), key=lambda r: r.get("index", 0))
        return [list(map(float, r["embedding"])) for r in rows]


class FunctionProvider:
    """Chat provider backed by a Python callable; counts every call.

    The callable receives the request and returns either a string or a
    ready-made :class:`ChatResponse`. It may raise :class:`TransportError`
    to simulate provider failures.
    """

    def __init__(self, fn: Callable[[ChatRequest], str | ChatResponse]) -> None:
        self.fn = fn
        self.calls: list[ChatRequest] = []
        self._lock = threading.Lock()

    @property
    def call_count(self) -> int:
        with self._lock:
            return len(self.calls)

    def chat(self, req: ChatRequest) -> ChatResponse:
        with self._lock:
            self.calls.append(req)
        out = self.fn(req)
        return out if isinstance(out, ChatResponse) else ChatResponse(out)


class HashEmbeddingProvider:
    """Deterministic offline embeddings from hashed character trigrams.

    Texts sharing many trigrams get similar vectors, which keeps vector
    search meaningful in tests. The empty string maps to a fixed basis vector.
    """

    def __init__(self, dim: int = 64) -> None:
        if dim < 2:
            raise ValueError("dim must be at least 2")
        self.dim = dim

    def _vector(self, text: str) -> list[float]:
        vec = [0.0] * self.dim
        padded = f"  {text.lower()} "
        grams = [padded[i:i + 3] for i in range(len(padded) - 2)] if text else []
        if not grams:
            vec[0] = 1.0
            return vec
        for g in grams:
            h = hashlib.blake2b(g.encode("utf-8"), digest_size=8).digest()
            idx = int.from_bytes(h[:4], "little") % self.dim
            vec[idx] += 1.0 if h[4] & 1 else -1.0
        if not any(vec):
            vec[0] = 1.0
        return vec

    def embed(self, texts: Sequence[str], model: str) -> list[list[float]]:
        return [self._vector(t) for t in texts]


@dataclass(frozen=True)
class ProviderSpec:
    name: str
    kind: str
    base_url: str | None = None
    auth_env: str | None = None
    dim: int = 64


def load_provider_specs(config: Mapping[str, Any]) -> list[ProviderSpec]:
    """Read ``[provider.<name>]`` tables from an already-parsed TOML document."""
    specs = []
    for name, table in sorted((config.get("provider") or {}).items()):
        if not isinstance(table, Mapping):
            raise ValueError(f"provider.{name} must be a table")
        kind = table.get("kind", "chat")
        if kind not in ("chat", "embedding", "hash"):
            raise ValueError(f"provider.{name}.kind must be chat, embedding or hash, got {kind!r}")
        if kind != "hash" and not table.get("base_url"):
            raise ValueError(f"provider.{name}.base_url is required")
        specs.append(ProviderSpec(name, kind, table.get("base_url"), table.get("auth_env"), int(table.get("dim", 64))))
    return specs


def load_toml(path: str | Path) -> dict[str, Any]:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def build_gateway(config: Mapping[str, Any], cache_dir: str | Path | None, parallelism: int = 8,
                  policy: RetryPolicy = RetryPolicy()) -> Gateway:
    chat: dict[str, Any] = {}
    embedding: dict[str, Any] = {}
    for spec in load_provider_specs(config):
        if spec.kind == "hash":
            embedding[spec.name] = HashEmbeddingProvider(spec.dim)
            continue
        provider = OpenAICompatibleProvider(spec.base_url or "", spec.auth_env)
        (chat if spec.kind == "chat" else embedding)[spec.name] = provider
    cache = ResponseCache(cache_dir) if cache_dir is not None else None
    return Gateway(chat, embedding, cache, policy, parallelism)
