"""Typed cell values and the kind lattice used by schemas and plans.

A cell is a plain Python object: None, bool, int, float, str,
datetime.date, or an aware datetime.datetime in UTC. Kinds are string
tags so they serialize directly into wire formats.
"""

from __future__ import annotations

import math
import re
from datetime import date, datetime, timezone

KIND_BOOLEAN = "boolean"
KIND_INTEGER = "integer"
KIND_FLOAT = "float"
KIND_TEXT = "text"
KIND_DATE = "date"
KIND_TIMESTAMP = "timestamp"

ALL_KINDS = (KIND_BOOLEAN, KIND_INTEGER, KIND_FLOAT, KIND_TEXT, KIND_DATE, KIND_TIMESTAMP)

# Inference tries kinds in this order; text never fails so it is the fallback.
INFERENCE_PRECEDENCE = (KIND_BOOLEAN, KIND_INTEGER, KIND_FLOAT, KIND_DATE, KIND_TIMESTAMP, KIND_TEXT)

NUMERIC_KINDS = frozenset({KIND_INTEGER, KIND_FLOAT})
TIME_KINDS = frozenset({KIND_DATE, KIND_TIMESTAMP})

_INT_RE = re.compile(r"^[+-]?\d+$")
_FLOAT_RE = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$")
_DATE_RE = re.compile(r"^\d{4}-\d{2}-\d{2}$")
# RFC 3339: date, T (or space), time, optional fraction, Z or numeric offset.
_TIMESTAMP_RE = re.compile(
    r"^\d{4}-\d{2}-\d{2}[Tt ]\d{2}:\d{2}:\d{2}(\.\d+)?([Zz]|[+-]\d{2}:\d{2})$"
)


class ValueParseError(ValueError):
    """Raised when a text token cannot be read as the requested kind."""


def parses_as(token: str, kind: str) -> bool:
    try:
        parse_value(token, kind)
        return True
    except ValueParseError:
        return False


def parse_value(token: str, kind: str):
    """Parse one text token into a cell of `kind`. Empty text is not handled
    here; callers decide whether "" means null or empty text."""
    if kind == KIND_TEXT:
        return token
    if kind == KIND_BOOLEAN:
        low = token.strip().lower()
        if low == "true":
            return True
        if low == "false":
            return False
        raise ValueParseError(f"not a boolean: {token!r}")
    if kind == KIND_INTEGER:
        if _INT_RE.match(token.strip()):
            return int(token)
        raise ValueParseError(f"not an integer: {token!r}")
    if kind == KIND_FLOAT:
        stripped = token.strip()
        if _FLOAT_RE.match(stripped):
            value = float(stripped)
            if math.isfinite(value):
                return value
        raise ValueParseError(f"not a finite float: {token!r}")
    if kind == KIND_DATE:
        stripped = token.strip()
        if _DATE_RE.match(stripped):
            try:
                return date.fromisoformat(stripped)
            except ValueError as exc:
                raise ValueParseError(str(exc)) from exc
        raise ValueParseError(f"not an ISO date: {token!r}")
    if kind == KIND_TIMESTAMP:
        stripped = token.strip()
        if _TIMESTAMP_RE.match(stripped):
            normalized = stripped[:10] + "T" + stripped[11:]
            if normalized.endswith(("Z", "z")):
                normalized = normalized[:-1] + "+00:00"
            try:
                parsed = datetime.fromisoformat(normalized)
            except ValueError as exc:
                raise ValueParseError(str(exc)) from exc
            return parsed.astimezone(timezone.utc)
        raise ValueParseError(f"not an RFC 3339 timestamp: {token!r}")
    raise ValueParseError(f"unknown kind {kind!r}")


def kind_of(cell) -> str | None:
    """Kind tag of a concrete cell; None for null cells."""
    if cell is None:
        return None
    if isinstance(cell, bool):
        return KIND_BOOLEAN
    if isinstance(cell, int):
        return KIND_INTEGER
    if isinstance(cell, float):
        return KIND_FLOAT
    if isinstance(cell, datetime):
        return KIND_TIMESTAMP
    if isinstance(cell, date):
        return KIND_DATE
    if isinstance(cell, str):
        return KIND_TEXT
    raise TypeError(f"unsupported cell type {type(cell)!r}")


def cell_matches_kind(cell, kind: str) -> bool:
    return cell is None or kind_of(cell) == kind


def to_text(cell) -> str:
    """Canonical text form: the serialization used for CSV output. Null
    becomes the empty string."""
    if cell is None:
        return ""
    if isinstance(cell, bool):
        return "true" if cell else "false"
    if isinstance(cell, datetime):
        return cell.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")
    if isinstance(cell, date):
        return cell.isoformat()
    if isinstance(cell, float):
        return repr(cell)
    return str(cell)


def display(cell) -> str:
    """Display form for rendered tables: floats at 2 decimal places,
    dates/timestamps ISO, null blank."""
    if cell is None:
        return ""
    if isinstance(cell, bool):
        return "true" if cell else "false"
    if isinstance(cell, float):
        return f"{cell:.2f}"
    if isinstance(cell, datetime):
        return cell.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")
    if isinstance(cell, date):
        return cell.isoformat()
    return str(cell)


def to_jsonable(cell):
    """JSON-safe representation preserving numerics; dates become ISO text."""
    if cell is None or isinstance(cell, (bool, int, str)):
        return cell
    if isinstance(cell, float):
        return cell
    if isinstance(cell, (datetime, date)):
        return to_text(cell)
    raise TypeError(f"unsupported cell type {type(cell)!r}")


def from_jsonable(raw, kind: str):
    """Inverse of to_jsonable for a known column kind."""
    if raw is None:
        return None
    if kind in (KIND_DATE, KIND_TIMESTAMP):
        return parse_value(str(raw), kind)
    if kind == KIND_FLOAT and isinstance(raw, (int, float)) and not isinstance(raw, bool):
        return float(raw)
    return raw
