"""Semantic layer: canonical fields, metric formulas, synonym chains, and
custom phrase rules that map analyst vocabulary onto concrete schemas.

Matching is exact after normalization (trim, lowercase, collapse
whitespace). There is deliberately no fuzzy matching: a term either
resolves, surfaces as ambiguous, or stays unknown so the abstention policy
can act on it.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from . import plans
from .plans import PlanParseError, expr_refs

HINT_KINDS = ("analysis_type", "output_format", "metric_suggestion", "filter_constraint")


class ModelError(Exception):
    """Base class for semantic-model load failures."""


class ModelParseError(ModelError):
    pass


class CycleError(ModelError):
    def __init__(self, cycle: list[str]):
        self.cycle = cycle
        super().__init__("synonym cycle: " + " -> ".join(cycle))


class DanglingTarget(ModelError):
    def __init__(self, alias: str, target: str):
        super().__init__(f"synonym {alias!r} points at undefined name {target!r}")


class BadMetricExpr(ModelError):
    def __init__(self, name: str, detail: str):
        super().__init__(f"metric {name!r}: {detail}")


def normalize_term(term: str) -> str:
    return re.sub(r"\s+", " ", term.strip().lower())


@dataclass(frozen=True)
class FieldDef:
    name: str
    dataset: str
    column: str
    description: str = ""


@dataclass(frozen=True)
class MetricDef:
    name: str
    expression: str
    description: str = ""


@dataclass(frozen=True)
class QueryHint:
    kind: str
    payload: str


@dataclass(frozen=True)
class CustomRule:
    trigger: str
    hint: QueryHint


@dataclass(frozen=True)
class Resolution:
    outcome: str  # field | metric | ambiguous | unknown
    target: str | None = None
    candidates: tuple[str, ...] = ()

    def __post_init__(self):
        if self.outcome == "ambiguous" and len(self.candidates) < 2:
            raise ValueError("ambiguous resolution needs at least 2 candidates")
        if self.outcome in ("field", "metric") and not self.target:
            raise ValueError(f"{self.outcome} resolution needs a target")


UNKNOWN = Resolution(outcome="unknown")


@dataclass(frozen=True)
class SemanticModel:
    fields: dict[str, FieldDef]
    metrics: dict[str, MetricDef]
    synonyms: dict[str, tuple[str, ...]]  # normalized alias -> declared targets
    rules: tuple[CustomRule, ...] = ()
    # alias -> fully resolved outcome, precomputed at load so cycles and
    # dangling targets cannot survive into query time.
    _resolved: dict[str, Resolution] = field(default_factory=dict)

    def resolve(self, term: str) -> Resolution:
        key = normalize_term(term)
        if not key:
            return UNKNOWN
        if key in self.fields:
            return Resolution(outcome="field", target=key)
        if key in self.metrics:
            return Resolution(outcome="metric", target=key)
        return self._resolved.get(key, UNKNOWN)

    def resolve_column(self, term: str) -> tuple[str, object]:
        """Plan-validator surface: ('column', name) | ('metric', name) |
        ('ambiguous', candidates) | ('unknown', None)."""
        res = self.resolve(term)
        if res.outcome == "field":
            return "column", self.fields[res.target].column
        if res.outcome == "metric":
            return "metric", res.target
        if res.outcome == "ambiguous":
            return "ambiguous", res.candidates
        return "unknown", None

    def vocabulary(self) -> list[str]:
        names = set(self.fields) | set(self.metrics) | set(self.synonyms)
        return sorted(names)


def empty_model() -> SemanticModel:
    return SemanticModel(fields={}, metrics={}, synonyms={}, rules=())


def _resolve_chain(alias: str, synonyms: dict[str, tuple[str, ...]],
                   fields: dict, metrics: dict) -> Resolution:
    terminals: list[str] = []
    kinds: list[str] = []

    def walk(name: str, trail: list[str]) -> None:
        if name in trail:
            raise CycleError(trail[trail.index(name):] + [name])
        if name in fields:
            if name not in terminals:
                terminals.append(name)
                kinds.append("field")
            return
        if name in metrics:
            if name not in terminals:
                terminals.append(name)
                kinds.append("metric")
            return
        if name in synonyms:
            for target in synonyms[name]:
                walk(target, trail + [name])
            return
        raise DanglingTarget(trail[-1] if trail else alias, name)

    walk(alias, [])
    if len(terminals) == 1:
        return Resolution(outcome=kinds[0], target=terminals[0])
    return Resolution(outcome="ambiguous", candidates=tuple(terminals))


def load_model(config_text: str) -> SemanticModel:
    """Parse and validate a semantic-model document (see the JSON layout in
    the repo docs). Synonym chains are resolved eagerly; metric formulas
    must parse and reference only defined fields (directly or through
    synonyms)."""
    try:
        doc = json.loads(config_text)
    except json.JSONDecodeError as exc:
        raise ModelParseError(f"invalid JSON at {exc.pos}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ModelParseError("model document must be a JSON object")
    unknown = set(doc) - {"fields", "metrics", "synonyms", "rules"}
    if unknown:
        raise ModelParseError(f"unknown top-level keys: {sorted(unknown)}")

    fields: dict[str, FieldDef] = {}
    for name, raw in (doc.get("fields") or {}).items():
        if not isinstance(raw, dict) or "dataset" not in raw or "column" not in raw:
            raise ModelParseError(f"field {name!r} needs 'dataset' and 'column'")
        bad = set(raw) - {"dataset", "column", "description"}
        if bad:
            raise ModelParseError(f"field {name!r} has unknown keys {sorted(bad)}")
        key = normalize_term(name)
        fields[key] = FieldDef(
            name=key,
            dataset=str(raw["dataset"]),
            column=str(raw["column"]),
            description=str(raw.get("description", "")),
        )

    metrics: dict[str, MetricDef] = {}
    for name, raw in (doc.get("metrics") or {}).items():
        if not isinstance(raw, dict) or "expression" not in raw:
            raise ModelParseError(f"metric {name!r} needs an 'expression'")
        bad = set(raw) - {"expression", "description"}
        if bad:
            raise ModelParseError(f"metric {name!r} has unknown keys {sorted(bad)}")
        key = normalize_term(name)
        if key in fields:
            raise ModelParseError(f"{name!r} is declared as both field and metric")
        metrics[key] = MetricDef(
            name=key,
            expression=str(raw["expression"]),
            description=str(raw.get("description", "")),
        )

    synonyms: dict[str, tuple[str, ...]] = {}
    for alias, target in (doc.get("synonyms") or {}).items():
        key = normalize_term(alias)
        if key in fields or key in metrics:
            raise ModelParseError(f"synonym {alias!r} shadows a defined field or metric")
        if isinstance(target, str):
            targets: tuple[str, ...] = (normalize_term(target),)
        elif isinstance(target, list) and target and all(isinstance(t, str) for t in target):
            targets = tuple(normalize_term(t) for t in target)
        else:
            raise ModelParseError(f"synonym {alias!r} must map to a name or a list of names")
        synonyms[key] = targets

    resolved: dict[str, Resolution] = {}
    for alias in synonyms:
        resolved[alias] = _resolve_chain(alias, synonyms, fields, metrics)

    rules: list[CustomRule] = []
    for i, raw in enumerate(doc.get("rules") or []):
        if not isinstance(raw, dict) or "trigger" not in raw or "hint" not in raw:
            raise ModelParseError(f"rule {i} needs 'trigger' and 'hint'")
        hint = raw["hint"]
        if not isinstance(hint, dict) or hint.get("kind") not in HINT_KINDS:
            raise ModelParseError(f"rule {i} hint kind must be one of {list(HINT_KINDS)}")
        rules.append(CustomRule(
            trigger=str(raw["trigger"]),
            hint=QueryHint(kind=hint["kind"], payload=str(hint.get("payload", ""))),
        ))

    model = SemanticModel(
        fields=fields, metrics=metrics, synonyms=synonyms, rules=tuple(rules), _resolved=resolved
    )

    for name, metric in metrics.items():
        try:
            expr = plans.parse_expr(metric.expression)
        except PlanParseError as exc:
            raise BadMetricExpr(name, f"does not parse: {exc}") from exc
        for ref in expr_refs(expr):
            res = model.resolve(ref)
            if res.outcome != "field":
                raise BadMetricExpr(
                    name, f"references {ref!r}, which is not a defined field"
                )
    return model


def resolve_term(model: SemanticModel, term: str) -> Resolution:
    return model.resolve(term)


def apply_rules(model: SemanticModel, query: str) -> list[QueryHint]:
    """Hints from every rule whose trigger matches the query, in rule order,
    deduplicated keeping the first occurrence. Triggers are case-insensitive
    word-boundary phrases, not regular expressions."""
    hints: list[QueryHint] = []
    seen: set[tuple[str, str]] = set()
    for rule in model.rules:
        pattern = r"\b" + re.escape(rule.trigger.strip()) + r"\b"
        if re.search(pattern, query, flags=re.IGNORECASE):
            key = (rule.hint.kind, rule.hint.payload)
            if key not in seen:
                seen.add(key)
                hints.append(rule.hint)
    return hints


def render_context(model: SemanticModel, datasets: list) -> str:
    """Deterministic vocabulary block for prompt embedding: dataset schemas,
    then fields, metrics, and synonyms in sorted order."""
    lines: list[str] = []
    for dataset in sorted(datasets, key=lambda d: d.name):
        cols = ", ".join(f"{c.name} ({c.kind}, {c.role})" for c in dataset.schema.columns)
        lines.append(f"dataset {dataset.name}: {cols}")
    for name in sorted(model.fields):
        f = model.fields[name]
        desc = f" -- {f.description}" if f.description else ""
        lines.append(f"field {name}: {f.dataset}.{f.column}{desc}")
    for name in sorted(model.metrics):
        m = model.metrics[name]
        desc = f" -- {m.description}" if m.description else ""
        lines.append(f"metric {name} = {m.expression}{desc}")
    for alias in sorted(model.synonyms):
        lines.append(f"synonym {alias} -> {' | '.join(model.synonyms[alias])}")
    return "\n".join(lines)
