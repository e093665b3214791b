"""Extraction of checkable claims from answer text: URLs, numeric tokens,
identifier-shaped field references, and multi-word capitalized phrases.

Dates and URLs are masked before number extraction so "2017-04-01" never
leaks 2017 as a numeric claim.
"""

from __future__ import annotations

import math
import re

_URL_RE = re.compile(r"https?://[^\s)\]}>\"',;]+")
_DATE_RE = re.compile(r"\b\d{4}-\d{2}-\d{2}(?:[Tt ]\d{2}:\d{2}:\d{2}(?:\.\d+)?(?:Z|[+-]\d{2}:\d{2})?)?\b")
_NUMBER_RE = re.compile(r"(?<![\w.\-])[-+]?\d[\d,]*(?:\.\d+)?%?(?![\w.])")
_IDENT_RE = re.compile(r"\b[a-z][a-z0-9]*(?:_[a-z0-9]+)+\b")
_CAP_PHRASE_RE = re.compile(r"\b[A-Z][A-Za-z0-9]*(?:\s+[A-Z][A-Za-z0-9]*)+\b")


def extract_urls(text: str) -> list[str]:
    return [m.group(0).rstrip(".,;:!?") for m in _URL_RE.finditer(text)]


def _mask(text: str) -> str:
    def blank(match: re.Match) -> str:
        return " " * len(match.group(0))

    return _DATE_RE.sub(blank, _URL_RE.sub(blank, text))


def extract_numbers(text: str) -> list[tuple[str, float]]:
    """(surface, value) pairs; commas stripped, trailing percent dropped."""
    out = []
    for match in _NUMBER_RE.finditer(_mask(text)):
        surface = match.group(0)
        cleaned = surface.rstrip("%").replace(",", "")
        try:
            out.append((surface, float(cleaned)))
        except ValueError:
            continue
    return out


def extract_identifiers(text: str) -> list[str]:
    """snake_case tokens; these read as field references and must resolve."""
    return [m.group(0) for m in _IDENT_RE.finditer(_mask(text))]


def extract_capitalized_phrases(text: str) -> list[str]:
    return [m.group(0) for m in _CAP_PHRASE_RE.finditer(_mask(text))]


def numbers_close(a: float, b: float, rel_tol: float = 1e-6) -> bool:
    if a == b:
        return True
    return math.isclose(a, b, rel_tol=rel_tol, abs_tol=0.0)


def matches_cell(value: float, cell) -> bool:
    """A numeric claim matches a cell when it equals the cell at display
    precision or is within 1e-6 relative tolerance of the raw value."""
    if isinstance(cell, bool) or not isinstance(cell, (int, float)):
        return False
    if numbers_close(value, float(cell)):
        return True
    if isinstance(cell, float) and numbers_close(value, float(f"{cell:.2f}")):
        return True
    return False
