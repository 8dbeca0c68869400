from __future__ import annotations

import re
from dataclasses import dataclass

from .corpus import ImageTextPair

MARKERS = ("filewords", "name")
_MARKER = re.compile(r"\[([^\[\]]*)\]")

# One template per line, as in a style_filewords.txt prompt-template file.
STYLE_FILEWORDS = (
    "a picture of [filewords], art by [name]",
    "a painting of [filewords], art by [name]",
    "a rendering of [filewords], art by [name]",
    "a photo of [filewords], in the style of [name]",
)

SUBJECT_TEMPLATES = (
    "a photo of a [name]",
    "a picture of a [name]",
    "a rendering of a [name]",
    "a photo of the [name]",
)


@dataclass(frozen=True)
class PromptTemplate:
    text: str

    def __post_init__(self):
        found = _MARKER.findall(self.text)
        if not found:
            raise ValueError(f"template {self.text!r} has no [filewords] or [name] marker")
        unknown = sorted(set(found) - set(MARKERS))
        if unknown:
            raise ValueError(f"template {self.text!r} has unknown markers {unknown}")

    @property
    def markers(self) -> set[str]:
        return set(_MARKER.findall(self.text))


def template_prompt(template: str | PromptTemplate, pair: ImageTextPair | None, name: str) -> str:
    """Substitute ``[filewords]`` with the pair's tags and ``[name]`` with ``name``."""
    if not isinstance(template, PromptTemplate):
        template = PromptTemplate(template)
    if not name:
        raise ValueError("template name must be non-empty")
    text = template.text
    if "filewords" in template.markers:
        if pair is None:
            raise ValueError(f"template {text!r} needs an image-text pair for [filewords]")
        text = text.replace("[filewords]", ", ".join(pair.caption))
    return text.replace("[name]", name)


def read_templates(path) -> list[PromptTemplate]:
    from pathlib import Path

    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [PromptTemplate(line.strip()) for line in lines if line.strip()]
