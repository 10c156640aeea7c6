"""Prompt templates. ``{source}`` / ``{reference}`` are replaced by the concepts' special tokens."""
from __future__ import annotations

from typing import Mapping

from .errors import ConfigurationError

SOURCE = "source"
REFERENCE = "reference"

SOURCE_TEMPLATE = "a photo of {source} person"
REFERENCE_TEMPLATE = "a photo of a person in the {reference} style"

COMPOSED_TEMPLATES = (
    "a photo of {source} person in the {reference} style",
    "a photo of {source} person in the {reference} style, high quality",
    "a portrait of {source} person in the {reference} style",
    "a close-up photo of {source} person in the {reference} style",
    "a picture of {source} person in the {reference} style, detailed",
    "an image of {source} person in the {reference} style",
    "a photo of {source} person in the {reference} style, studio lighting",
    "a photo of {source} person in the {reference} style, sharp focus",
    "a professional photo of {source} person in the {reference} style",
)


def fill(template: str, tokens: Mapping[str, str], extra: str | None = None) -> str:
    try:
        text = template.format_map(dict(tokens))
    except KeyError as exc:
        raise ConfigurationError(f"template {template!r} references unknown concept {exc}") from None
    if extra:
        text = f"{text}, {extra.strip()}"
    return text
