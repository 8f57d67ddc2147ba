"""Pull a JSON value out of free-form model output."""

from __future__ import annotations

import json
import re
from typing import Any

_FENCE_RE = re.compile(r"```[A-Za-z0-9_-]*[ \t]*\n(.*?)\n?```", re.DOTALL)


class StructuredOutputError(ValueError):
    """No parseable JSON in the text; the caller should re-prompt once."""

    def __init__(self, message: str, text: str) -> None:
        super().__init__(message)
        self.text = text


def _match_close(text: str, start: int) -> int | None:
    """Index of the bracket closing ``text[start]``, skipping string literals."""
    stack = []
    in_str = False
    escaped = False
    pairs = {"{": "}", "[": "]"}
    for i in range(start, len(text)):
        ch = text[i]
        if in_str:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_str = False
            continue
        if ch == '"':
            in_str = True
        elif ch in pairs:
            stack.append(pairs[ch])
        elif ch in "}]":
            if not stack or stack.pop() != ch:
                return None
            if not stack:
                return i
    return None


def _candidates(text: str, expect: str | None) -> list[int]:
    opens = "{" if expect == "object" else "[" if expect == "array" else "{["
    return [i for i, ch in enumerate(text) if ch in opens]


def parse_structured_output(text: str, schema_hint: str = "", expect: str | None = None) -> Any:
    """Parse the JSON payload of a model response.

    Markdown fences are stripped, then prose around the first balanced
    ``{...}``/``[...]`` that parses is discarded. ``expect`` may be
    ``"object"`` or ``"array"`` to restrict the payload kind. Raises
    :class:`StructuredOutputError` when nothing parses.
    """
    bodies = [m.group(1) for m in _FENCE_RE.finditer(text)] + [text]
    for body in bodies:
        stripped = body.strip()
        try:
            value = json.loads(stripped)
        except ValueError:
            pass
        else:
            if _kind_ok(value, expect):
                return value
        for start in _candidates(body, expect):
            end = _match_close(body, start)
            if end is None:
                continue
            try:
                value = json.loads(body[start:end + 1])
            except ValueError:
                continue
            if _kind_ok(value, expect):
                return value
    what = f" matching {schema_hint}" if schema_hint else ""
    raise StructuredOutputError(f"no parseable JSON{what} in model output", text)


def _kind_ok(value: Any, expect: str | None) -> bool:
    if expect == "object":
        return isinstance(value, dict)
    if expect == "array":
        return isinstance(value, list)
    return isinstance(value, (dict, list))


def repair_prompt(schema_hint: str) -> str:
    """Follow-up message asking the model to restate its answer as bare JSON."""
    return (
        "Your previous response could not be parsed. Reply again with only the JSON "
        f"value, no prose and no code fences. Required format:\n{schema_hint}"
    )
