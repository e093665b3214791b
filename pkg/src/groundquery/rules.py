"""Strict rules: input screening, execution preconditions with abstention,
and post-answer auditing.

All pattern lists come from configuration; the engine ships with nothing
hard-coded, so an empty ruleset passes everything (rules are strictly
subtractive).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field as dataclass_field
from datetime import date, datetime, timezone

from . import claims
from .executor import ResultTable, prefilter_count
from .plans import QueryPlan, Verdict, Violation
from .tabular import Dataset
from .values import KIND_TEXT

PROMPT_INTRUSION = "PROMPT_INTRUSION"
SECURITY = "SECURITY"
INSUFFICIENT_DATA = "INSUFFICIENT_DATA"
INSUFFICIENT_COVERAGE = "INSUFFICIENT_COVERAGE"
FORBIDDEN_OPERATION = "FORBIDDEN_OPERATION"

BROKEN_LINK = "BROKEN_LINK"
FABRICATED_VALUE = "FABRICATED_VALUE"
SENSITIVE_LEAK = "SENSITIVE_LEAK"


@dataclass(frozen=True)
class RuleSet:
    min_rows: int = 1
    require_time_coverage: bool = True
    forbidden_ops: tuple[str, ...] = ()
    sensitive_terms: tuple[str, ...] = ()
    intrusion_patterns: tuple[str, ...] = ()
    url_policy: bool = True

    def __post_init__(self):
        if self.min_rows < 0:
            raise ValueError("min_rows must be >= 0")


@dataclass(frozen=True)
class AuditViolation:
    code: str
    claim: str
    detail: str

    def to_json_dict(self) -> dict:
        return {"code": self.code, "claim": self.claim, "detail": self.detail}


def load_rules(config_text: str) -> RuleSet:
    doc = json.loads(config_text)
    if not isinstance(doc, dict):
        raise ValueError("rules document must be a JSON object")
    unknown = set(doc) - {
        "min_rows", "require_time_coverage", "forbidden_ops",
        "sensitive_terms", "intrusion_patterns", "url_policy",
    }
    if unknown:
        raise ValueError(f"unknown rules keys: {sorted(unknown)}")
    return RuleSet(
        min_rows=int(doc.get("min_rows", 1)),
        require_time_coverage=bool(doc.get("require_time_coverage", True)),
        forbidden_ops=tuple(doc.get("forbidden_ops", [])),
        sensitive_terms=tuple(doc.get("sensitive_terms", [])),
        intrusion_patterns=tuple(doc.get("intrusion_patterns", [])),
        url_policy=bool(doc.get("url_policy", True)),
    )


def empty_rules() -> RuleSet:
    return RuleSet(min_rows=0, require_time_coverage=False, url_policy=False)


def _normalize(text: str) -> str:
    return re.sub(r"\s+", " ", text.lower())


def screen_query(query: str, rules: RuleSet) -> Verdict:
    """Case-insensitive substring screening of intrusion patterns and
    sensitive terms against the raw query."""
    flat = _normalize(query)
    violations = []
    for pattern in rules.intrusion_patterns:
        if _normalize(pattern) in flat:
            violations.append(Violation(
                code=PROMPT_INTRUSION,
                message=f"query matches intrusion pattern {pattern!r}",
                path="query",
            ))
    for term in rules.sensitive_terms:
        if _normalize(term) in flat:
            violations.append(Violation(
                code=SECURITY,
                message=f"query mentions sensitive term {term!r}",
                path="query",
            ))
    if violations:
        return Verdict(status="reject", violations=tuple(violations), stage="screen")
    return Verdict(status="pass", stage="screen")


def plan_operation_tags(plan: QueryPlan) -> set[str]:
    """Operation tags a ruleset can forbid. `raw_export` marks passthrough
    plans that would dump unaggregated rows."""
    tags = set()
    if plan.joins:
        tags.add("join")
    if plan.filters:
        tags.add("filter")
    if plan.aggregates:
        tags.add("aggregate")
    if plan.derive:
        tags.add("derive")
    if plan.output.format == "chart":
        tags.add("chart")
    if not plan.aggregates and not plan.group_by:
        tags.add("raw_export")
    return tags


def _plan_date_window(plan: QueryPlan, dataset: Dataset) -> tuple[date | None, date | None] | None:
    """Requested [start, end] from filters on the source's time column;
    None when the plan does not constrain time."""
    time_col = dataset.schema.time_column()
    if time_col is None:
        return None
    low: date | None = None
    high: date | None = None
    constrained = False
    for spec in plan.filters:
        if spec.col.lower() != time_col.name.lower():
            continue
        bounds = [_as_date(a) for a in spec.args if a is not None]
        if not bounds:
            continue
        if spec.op == "between":
            constrained = True
            low = _tighten(low, min(bounds), max)
            high = _tighten(high, max(bounds), min)
        elif spec.op in ("ge", "gt"):
            constrained = True
            low = _tighten(low, bounds[0], max)
        elif spec.op in ("le", "lt"):
            constrained = True
            high = _tighten(high, bounds[0], min)
        elif spec.op == "eq":
            constrained = True
            low = _tighten(low, bounds[0], max)
            high = _tighten(high, bounds[0], min)
        elif spec.op == "in":
            constrained = True
            low = _tighten(low, min(bounds), max)
            high = _tighten(high, max(bounds), min)
    if not constrained:
        return None
    return low, high


def _as_date(value) -> date:
    if isinstance(value, datetime):
        return value.astimezone(timezone.utc).date()
    if isinstance(value, date):
        return value
    raise TypeError(f"not a date value: {value!r}")


def _tighten(current, candidate, chooser):
    return candidate if current is None else chooser(current, candidate)


def check_preconditions(plan: QueryPlan, store, rules: RuleSet) -> Verdict:
    """Abstain when the data cannot support the plan; reject forbidden
    operations. Coverage uses interval intersection: a partially covered
    range passes and is qualified by the prompt metadata instead."""
    tags = plan_operation_tags(plan)
    forbidden = sorted(tags & set(rules.forbidden_ops))
    if forbidden:
        return Verdict(
            status="reject",
            violations=tuple(
                Violation(code=FORBIDDEN_OPERATION, message=f"operation {tag!r} is forbidden", path="plan")
                for tag in forbidden
            ),
            stage="preconditions",
        )

    if rules.require_time_coverage:
        dataset = store.get(plan.source)
        if dataset is not None and dataset.metadata.time_coverage is not None:
            window = _plan_date_window(plan, dataset)
            if window is not None:
                lo, hi = window
                cov_lo, cov_hi = dataset.metadata.time_coverage
                if (lo is not None and lo > cov_hi) or (hi is not None and hi < cov_lo):
                    requested = f"{lo or '-inf'}..{hi or '+inf'}"
                    return Verdict(
                        status="abstain",
                        reason=INSUFFICIENT_COVERAGE,
                        violations=(Violation(
                            code=INSUFFICIENT_COVERAGE,
                            message=(
                                f"requested range {requested} does not intersect data coverage "
                                f"{cov_lo}..{cov_hi}"
                            ),
                            path="filters",
                        ),),
                        stage="preconditions",
                    )

    if rules.min_rows > 0:
        matching = prefilter_count(plan, store)
        if matching < rules.min_rows:
            return Verdict(
                status="abstain",
                reason=INSUFFICIENT_DATA,
                violations=(Violation(
                    code=INSUFFICIENT_DATA,
                    message=f"only {matching} rows match, below the minimum of {rules.min_rows}",
                    path="filters",
                ),),
                stage="preconditions",
            )
    return Verdict(status="pass", stage="preconditions")


def _text_values(result: ResultTable | None, store) -> set[str]:
    out: set[str] = set()
    if result is not None:
        for col_idx, col in enumerate(result.columns):
            if col.kind == KIND_TEXT:
                for row in result.rows:
                    if row[col_idx] is not None:
                        out.add(row[col_idx])
    for dataset in store.all():
        for col_idx, col in enumerate(dataset.schema.columns):
            if col.kind == KIND_TEXT:
                for row in dataset.rows:
                    if row[col_idx] is not None:
                        out.add(row[col_idx])
    return out


def audit_answer(answer: str, result: ResultTable | None, store, rules: RuleSet) -> list[AuditViolation]:
    """Post-answer audit: URLs must exist in the data, numeric tokens must
    ground in the result, sensitive terms must not leak."""
    violations: list[AuditViolation] = []

    if rules.url_policy:
        known = _text_values(result, store)
        for url in claims.extract_urls(answer):
            if url not in known:
                violations.append(AuditViolation(
                    code=BROKEN_LINK, claim=url, detail="URL does not appear in any queried data",
                ))

    if result is not None:
        cells = [cell for row in result.rows for cell in row]
        for surface, value in claims.extract_numbers(answer):
            if not any(claims.matches_cell(value, cell) for cell in cells):
                violations.append(AuditViolation(
                    code=FABRICATED_VALUE, claim=surface,
                    detail="number does not match any cell of the executed result",
                ))

    flat = _normalize(answer)
    for term in rules.sensitive_terms:
        if _normalize(term) in flat:
            violations.append(AuditViolation(
                code=SENSITIVE_LEAK, claim=term, detail="sensitive term appears in the answer",
            ))
    return violations
