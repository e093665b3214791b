"""Deterministic prompt assembly and relative-date resolution.

No wall-clock reads: every date computation flows through the caller's
anchor date, and identical inputs produce byte-identical bundles.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from datetime import date, timedelta

from .semantics import QueryHint
from .tabular import DatasetMetadata


@dataclass(frozen=True)
class DateRange:
    start: date
    end: date

    def __post_init__(self):
        if self.start > self.end:
            raise ValueError("start must be <= end")

    def __str__(self):
        return f"{self.start.isoformat()}..{self.end.isoformat()}"


@dataclass(frozen=True)
class PromptBundle:
    system_text: str
    context_blocks: tuple[tuple[str, str], ...]
    user_query: str
    temperature: float = 0.0
    max_tokens: int = 1024

    def block(self, label: str) -> str | None:
        for name, text in self.context_blocks:
            if name == label:
                return text
        return None

    def to_json_dict(self) -> dict:
        return {
            "system": self.system_text,
            "blocks": [{"label": label, "text": text} for label, text in self.context_blocks],
            "query": self.user_query,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }


_WORD_NUMBERS = {
    "one": 1, "two": 2, "three": 3, "four": 4, "five": 5, "six": 6,
    "seven": 7, "eight": 8, "nine": 9, "ten": 10, "eleven": 11, "twelve": 12,
}

_NUM = r"\d+|" + "|".join(_WORD_NUMBERS)

_PHRASE_RE = re.compile(
    r"\b(?:"
    rf"(?P<days>(?:last|past)\s+(?P<dn>{_NUM})\s+days?)"
    rf"|(?P<nmonths>(?:last|past)\s+(?P<mn>{_NUM})\s+months?)"
    r"|(?P<prevmonth>(?:last|past)\s+month)"
    r"|(?P<thismonth>this\s+month)"
    r"|(?P<prevquarter>(?:last|past)\s+quarter)"
    r"|(?P<prevyear>(?:last|past)\s+year)"
    r"|(?P<thisyear>this\s+year)"
    r"|(?P<quarter>q(?P<qn>[1-4])(?:(?:\s+(?:of\s+)?|,\s*)(?P<qy>\d{4}))?)"
    r")\b",
    re.IGNORECASE,
)


def _num(token: str) -> int:
    return int(token) if token.isdigit() else _WORD_NUMBERS[token.lower()]


def _month_start(day: date) -> date:
    return day.replace(day=1)


def _add_months(day: date, months: int) -> date:
    total = day.year * 12 + (day.month - 1) + months
    return date(total // 12, total % 12 + 1, 1)


def _quarter_start(day: date) -> date:
    return date(day.year, 3 * ((day.month - 1) // 3) + 1, 1)


def resolve_relative_dates(text: str, now: date) -> list[tuple[str, DateRange]]:
    """Resolve supported relative-date phrases against the anchor.

    Windows are pinned as: "last N days" ends at the anchor inclusive;
    "last/past month|quarter|year" means the previous complete calendar
    period; "this month|year" runs from the period start to the anchor;
    "last N months" covers the N complete months before the current one;
    "Qn [year]" is the full calendar quarter, defaulting to the anchor's
    year. Matches scan left to right without overlap.
    """
    out: list[tuple[str, DateRange]] = []
    for match in _PHRASE_RE.finditer(text):
        phrase = match.group(0)
        if match.group("days"):
            n = _num(match.group("dn"))
            if n < 1:
                continue
            out.append((phrase, DateRange(now - timedelta(days=n - 1), now)))
        elif match.group("nmonths"):
            n = _num(match.group("mn"))
            if n < 1:
                continue
            current = _month_start(now)
            out.append((phrase, DateRange(_add_months(current, -n), current - timedelta(days=1))))
        elif match.group("prevmonth"):
            current = _month_start(now)
            out.append((phrase, DateRange(_add_months(current, -1), current - timedelta(days=1))))
        elif match.group("thismonth"):
            out.append((phrase, DateRange(_month_start(now), now)))
        elif match.group("prevquarter"):
            current = _quarter_start(now)
            out.append((phrase, DateRange(_add_months(current, -3), current - timedelta(days=1))))
        elif match.group("prevyear"):
            out.append((phrase, DateRange(date(now.year - 1, 1, 1), date(now.year - 1, 12, 31))))
        elif match.group("thisyear"):
            out.append((phrase, DateRange(date(now.year, 1, 1), now)))
        elif match.group("quarter"):
            year = int(match.group("qy")) if match.group("qy") else now.year
            q = int(match.group("qn"))
            start = date(year, 3 * (q - 1) + 1, 1)
            out.append((phrase, DateRange(start, _add_months(start, 3) - timedelta(days=1))))
    return out


_SYSTEM_TEXT = """\
You are a data analyst that answers questions strictly from the datasets \
described below. Respond with exactly one JSON document and nothing else: \
either a query plan matching the published grammar, or an abstention \
document {"abstain": "<reason>"} when the data is insufficient, out of \
coverage, or the question cannot be answered from the datasets. Never \
invent columns, datasets, numbers, or links. Date phrase conventions: \
"last N days" ends at the reference date inclusive; "last month/quarter/\
year" is the previous complete calendar period; "this month/year" runs \
from the period start to the reference date; "Qn" is a full calendar \
quarter of the reference year unless another year is given.\
"""

_RULES_REMINDER = """\
Abstain instead of guessing: if the requested range is outside the data's \
coverage or a term does not resolve to a known field, emit the abstention \
document. Only reference columns listed in the schemas and vocabulary.\
"""

_BASELINE_SYSTEM = "You are a helpful data analyst. Answer the question."


def baseline_prompt(query: str) -> PromptBundle:
    """Minimal prompt used when structured output is disabled."""
    return PromptBundle(system_text=_BASELINE_SYSTEM, context_blocks=(), user_query=query)


def render_metadata_block(metadata: list[tuple[str, DatasetMetadata]]) -> str:
    lines = []
    for name, meta in sorted(metadata, key=lambda pair: pair[0]):
        coverage = "none"
        if meta.time_coverage is not None:
            coverage = f"{meta.time_coverage[0].isoformat()}..{meta.time_coverage[1].isoformat()}"
        lines.append(
            f"dataset {name}: source {meta.source_label or 'unknown'}; "
            f"rows {meta.row_count}; covers {coverage}"
        )
    return "\n".join(lines)


def build_prompt(
    query: str,
    semantic_context: str,
    metadata: list[tuple[str, DatasetMetadata]],
    now: date,
    hints: list[QueryHint],
    grammar_text: str,
) -> PromptBundle:
    """Assemble the guarded prompt. Block order is fixed: grammar, rules
    reminder, dataset metadata, semantic context, resolved dates, hints;
    empty blocks are omitted."""
    blocks: list[tuple[str, str]] = []
    if grammar_text:
        blocks.append(("grammar", grammar_text))
    blocks.append(("rules", _RULES_REMINDER))
    if metadata:
        blocks.append(("metadata", render_metadata_block(metadata)))
    if semantic_context:
        blocks.append(("semantics", semantic_context))
    resolved = resolve_relative_dates(query, now)
    date_lines = [f"reference date: {now.isoformat()}"]
    date_lines += [f'"{phrase}" -> {rng}' for phrase, rng in resolved]
    blocks.append(("dates", "\n".join(date_lines)))
    if hints:
        blocks.append(("hints", "\n".join(f"{h.kind}: {h.payload}" for h in hints)))
    return PromptBundle(
        system_text=_SYSTEM_TEXT,
        context_blocks=tuple(blocks),
        user_query=query,
    )
