"""Adapter trigger directives embedded in prompts, e.g. ``<lora:aki:1>``."""

from __future__ import annotations

import re
from dataclasses import dataclass

KINDS = ("lora", "hypernet")

# Any angle-bracket group containing a colon is a directive; plain
# ``<the core bridge>`` placeholders never contain one.
_CANDIDATE = re.compile(r"<[^<>]*:[^<>]*>")
_DECIMAL = re.compile(r"[+-]?(?:\d+(?:\.\d*)?|\.\d+)")


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class PromptDirective:
    kind: str
    name: str
    weight: float


def _parse_directive(text: str) -> PromptDirective:
    parts = text[1:-1].split(":")
    if len(parts) != 3:
        raise PromptError(f"malformed directive {text!r}: expected <kind:name:weight>")
    kind, name, weight = (p.strip() for p in parts)
    if kind not in KINDS:
        raise PromptError(f"malformed directive {text!r}: kind must be one of {KINDS}")
    if not name:
        raise PromptError(f"malformed directive {text!r}: empty artifact name")
    if not _DECIMAL.fullmatch(weight):
        raise PromptError(f"malformed directive {text!r}: weight {weight!r} is not a decimal number")
    return PromptDirective(kind, name, float(weight))


def parse_prompt(raw: str) -> tuple[str, list[PromptDirective]]:
    """Split ``raw`` into tokenizer text and the adapter directives it contains, in order."""
    directives = []
    text = raw
    while (m := _CANDIDATE.search(text)) is not None:
        directives.append(_parse_directive(m.group()))
        before, after = text[:m.start()], text[m.end():]
        stripped = before.rstrip()
        if stripped.endswith(","):
            before = stripped[:-1]
        else:
            after = re.sub(r"^\s*,", "", after)
        text = before.rstrip() + after if before.strip() else after.lstrip()
    if directives:
        text = text.strip()
    return text, directives
