"""Literal ``{name}`` substitution for prompt templates."""

from __future__ import annotations

from typing import Mapping


def substitute(template: str, fields: Mapping[str, str]) -> str:
    """Replace ``{name}`` for known names in one left-to-right pass.

    Unlike ``str.format`` this never re-reads substituted text and leaves
    unknown or unbalanced braces alone, so user content containing ``{`` is
    emitted verbatim.
    """
    out = []
    i = 0
    while i < len(template):
        if template[i] == "{":
            j = template.find("}", i)
            name = template[i + 1:j] if j != -1 else None
            if name in fields:
                out.append(fields[name])
                i = j + 1
                continue
        out.append(template[i])
        i += 1
    return "".join(out)
