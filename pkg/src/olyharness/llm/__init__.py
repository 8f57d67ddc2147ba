"""Model access: gateway, cache, providers and structured-output parsing."""

from .gateway import (
    ChatProvider,
    ChatRequest,
    ChatResponse,
    EmbeddingProvider,
    FinishReason,
    Gateway,
    IntegrityError,
    Message,
    ResponseCache,
    RetryPolicy,
    Role,
    TransportError,
    cache_key,
)
from .providers import FunctionProvider, HashEmbeddingProvider, OpenAICompatibleProvider, build_gateway
from .structured import StructuredOutputError, parse_structured_output, repair_prompt

__all__ = [
    "ChatProvider", "ChatRequest", "ChatResponse", "EmbeddingProvider", "FinishReason", "Gateway",
    "IntegrityError", "Message", "ResponseCache", "RetryPolicy", "Role", "TransportError", "cache_key",
    "FunctionProvider", "HashEmbeddingProvider", "OpenAICompatibleProvider", "build_gateway",
    "StructuredOutputError", "parse_structured_output", "repair_prompt",
]
