"""Query-plan document language: strict JSON grammar, arithmetic expression
parser, and the schema-aware validator that must pass before execution.

The plan is a closed DSL (no SQL or code passthrough): source, joins,
conjunctive filters, group_by, aggregates, derived expressions, sort, limit,
and an output spec. Unknown keys are rejected so format drift from the
model surfaces as a parse failure instead of a silent misread.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from . import values
from .tabular import Column, Dataset, ROLE_DIMENSION, ROLE_MEASURE, ROLE_TIME, Schema
from .values import (
    KIND_BOOLEAN,
    KIND_DATE,
    KIND_FLOAT,
    KIND_INTEGER,
    KIND_TEXT,
    KIND_TIMESTAMP,
    NUMERIC_KINDS,
)

AGG_FNS = ("sum", "avg", "count", "min", "max")
FILTER_OPS = ("eq", "ne", "lt", "le", "gt", "ge", "between", "in", "contains")
JOIN_KINDS = ("inner", "left")
OUTPUT_FORMATS = ("scalar", "table", "chart")
CHART_KINDS = ("line", "bar", "pie", "stacked_bar")
SORT_DIRS = ("asc", "desc")

# Fixed violation vocabulary so evaluation can bucket failures.
UNKNOWN_COLUMN = "UNKNOWN_COLUMN"
UNKNOWN_DATASET = "UNKNOWN_DATASET"
TYPE_MISMATCH = "TYPE_MISMATCH"
BAD_ALIAS = "BAD_ALIAS"
BAD_SORT_KEY = "BAD_SORT_KEY"
BAD_CHART_SHAPE = "BAD_CHART_SHAPE"
BAD_JOIN_KEYS = "BAD_JOIN_KEYS"
BAD_LIMIT = "BAD_LIMIT"


class PlanParseError(Exception):
    """Strict-parse failure; carries position, what was expected, and the
    offending fragment."""

    def __init__(self, position, expected: str, fragment: str = ""):
        self.position = position
        self.expected = expected
        self.fragment = fragment
        super().__init__(f"at {position}: expected {expected}" + (f", got {fragment!r}" if fragment else ""))


# --- expression language ----------------------------------------------------

@dataclass(frozen=True)
class Lit:
    value: int | float


@dataclass(frozen=True)
class Ref:
    name: str


@dataclass(frozen=True)
class Bin:
    op: str
    left: "Expr"
    right: "Expr"


Expr = Lit | Ref | Bin

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+\.?\d*|\.\d+)|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)|(?P<op>[()+\-*/]))"
)


def _tokenize_expr(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        match = _TOKEN_RE.match(text, pos)
        if match is None:
            rest = text[pos:].lstrip()
            if not rest:
                break
            raise PlanParseError(pos, "a number, identifier, or operator", rest[:10])
        if match.lastgroup:
            tokens.append((match.lastgroup, match.group(match.lastgroup), match.start(match.lastgroup)))
        pos = match.end()
    return tokens


class _ExprParser:
    """expr := term (('+'|'-') term)* ; term := factor (('*'|'/') factor)* ;
    factor := number | identifier | '(' expr ')'"""

    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize_expr(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else None

    def advance(self):
        tok = self.peek()
        self.i += 1
        return tok

    def parse(self) -> Expr:
        node = self.expr()
        leftover = self.peek()
        if leftover is not None:
            raise PlanParseError(leftover[2], "end of expression", leftover[1])
        return node

    def expr(self) -> Expr:
        node = self.term()
        while True:
            tok = self.peek()
            if tok and tok[0] == "op" and tok[1] in "+-":
                self.advance()
                node = Bin(tok[1], node, self.term())
            else:
                return node

    def term(self) -> Expr:
        node = self.factor()
        while True:
            tok = self.peek()
            if tok and tok[0] == "op" and tok[1] in "*/":
                self.advance()
                node = Bin(tok[1], node, self.factor())
            else:
                return node

    def factor(self) -> Expr:
        tok = self.advance()
        if tok is None:
            raise PlanParseError(len(self.text), "a number, identifier, or '('")
        kind, text, pos = tok
        if kind == "num":
            return Lit(float(text) if "." in text else int(text))
        if kind == "ident":
            return Ref(text)
        if kind == "op" and text == "(":
            node = self.expr()
            closing = self.advance()
            if closing is None or closing[1] != ")":
                raise PlanParseError(
                    closing[2] if closing else len(self.text), "')'", closing[1] if closing else ""
                )
            return node
        raise PlanParseError(pos, "a number, identifier, or '('", text)


def parse_expr(text: str) -> Expr:
    return _ExprParser(text).parse()


_PRECEDENCE = {"+": 1, "-": 1, "*": 2, "/": 2}


def expr_to_text(expr: Expr, parent_prec: int = 0, right_side: bool = False) -> str:
    if isinstance(expr, Lit):
        return repr(expr.value)
    if isinstance(expr, Ref):
        return expr.name
    prec = _PRECEDENCE[expr.op]
    rendered = "{} {} {}".format(
        expr_to_text(expr.left, prec, False),
        expr.op,
        expr_to_text(expr.right, prec, True),
    )
    if prec < parent_prec or (prec == parent_prec and right_side):
        return f"({rendered})"
    return rendered


def expr_refs(expr: Expr) -> list[str]:
    if isinstance(expr, Ref):
        return [expr.name]
    if isinstance(expr, Bin):
        return expr_refs(expr.left) + expr_refs(expr.right)
    return []


# --- plan document ----------------------------------------------------------

@dataclass(frozen=True)
class JoinSpec:
    right: str
    on: tuple[tuple[str, str], ...]
    kind: str = "inner"


@dataclass(frozen=True)
class FilterSpec:
    col: str
    op: str
    args: tuple


@dataclass(frozen=True)
class AggSpec:
    fn: str
    col: str  # column ref or "*" (count only)
    alias: str


@dataclass(frozen=True)
class DeriveSpec:
    alias: str
    expr: Expr


@dataclass(frozen=True)
class SortSpec:
    by: str
    dir: str = "asc"


@dataclass(frozen=True)
class OutputSpec:
    format: str
    chart_kind: str | None = None


@dataclass(frozen=True)
class QueryPlan:
    source: str
    joins: tuple[JoinSpec, ...] = ()
    filters: tuple[FilterSpec, ...] = ()
    group_by: tuple[str, ...] = ()
    aggregates: tuple[AggSpec, ...] = ()
    derive: tuple[DeriveSpec, ...] = ()
    sort: tuple[SortSpec, ...] = ()
    limit: int | None = None
    output: OutputSpec = field(default_factory=lambda: OutputSpec("table"))


def _require(obj: dict, path: str, allowed: dict[str, type | tuple]) -> None:
    for key in obj:
        if key not in allowed:
            raise PlanParseError(path, f"one of {sorted(allowed)}", key)


def _typed(obj: dict, key: str, path: str, expected, required: bool = False, default=None):
    if key not in obj or obj[key] is None:
        if required:
            raise PlanParseError(path, f"required key {key!r}")
        return default
    value = obj[key]
    if expected is int and isinstance(value, bool):
        raise PlanParseError(f"{path}.{key}", "an integer", repr(value))
    if not isinstance(value, expected):
        raise PlanParseError(f"{path}.{key}", getattr(expected, "__name__", str(expected)), repr(value)[:40])
    return value


def _enum(value: str, options: tuple, path: str) -> str:
    if value not in options:
        raise PlanParseError(path, f"one of {list(options)}", str(value))
    return value


def parse_plan(text: str) -> QueryPlan:
    """Strictly parse a plan document. Unknown keys, wrong shapes, and bad
    enum values raise PlanParseError; missing optional sections default to
    empty."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise PlanParseError(exc.pos, "valid JSON", exc.msg) from exc
    if not isinstance(doc, dict):
        raise PlanParseError(0, "a JSON object", type(doc).__name__)

    _require(doc, "$", {
        "source": str, "joins": list, "filters": list, "group_by": list,
        "aggregates": list, "derive": list, "sort": list, "limit": int, "output": dict,
    })
    source = _typed(doc, "source", "$", str, required=True)

    joins = []
    for i, raw in enumerate(_typed(doc, "joins", "$", list, default=[])):
        path = f"joins[{i}]"
        if not isinstance(raw, dict):
            raise PlanParseError(path, "an object")
        _require(raw, path, {"right": str, "on": list, "kind": str})
        pairs = []
        on = _typed(raw, "on", path, list, required=True)
        if not on:
            raise PlanParseError(f"{path}.on", "at least one [left, right] pair")
        for j, pair in enumerate(on):
            if not isinstance(pair, list) or len(pair) != 2 or not all(isinstance(p, str) for p in pair):
                raise PlanParseError(f"{path}.on[{j}]", "a [left, right] column pair")
            pairs.append((pair[0], pair[1]))
        joins.append(JoinSpec(
            right=_typed(raw, "right", path, str, required=True),
            on=tuple(pairs),
            kind=_enum(_typed(raw, "kind", path, str, default="inner"), JOIN_KINDS, f"{path}.kind"),
        ))

    filters = []
    for i, raw in enumerate(_typed(doc, "filters", "$", list, default=[])):
        path = f"filters[{i}]"
        if not isinstance(raw, dict):
            raise PlanParseError(path, "an object")
        _require(raw, path, {"col": str, "op": str, "args": list})
        args = _typed(raw, "args", path, list, required=True)
        for j, arg in enumerate(args):
            if isinstance(arg, (dict, list)):
                raise PlanParseError(f"{path}.args[{j}]", "a scalar value")
        filters.append(FilterSpec(
            col=_typed(raw, "col", path, str, required=True),
            op=_enum(_typed(raw, "op", path, str, required=True), FILTER_OPS, f"{path}.op"),
            args=tuple(args),
        ))

    group_by = []
    for i, raw in enumerate(_typed(doc, "group_by", "$", list, default=[])):
        if not isinstance(raw, str):
            raise PlanParseError(f"group_by[{i}]", "a column name")
        group_by.append(raw)

    aggregates = []
    for i, raw in enumerate(_typed(doc, "aggregates", "$", list, default=[])):
        path = f"aggregates[{i}]"
        if not isinstance(raw, dict):
            raise PlanParseError(path, "an object")
        _require(raw, path, {"fn": str, "col": str, "as": str})
        aggregates.append(AggSpec(
            fn=_enum(_typed(raw, "fn", path, str, required=True), AGG_FNS, f"{path}.fn"),
            col=_typed(raw, "col", path, str, required=True),
            alias=_typed(raw, "as", path, str, required=True),
        ))

    derive = []
    for i, raw in enumerate(_typed(doc, "derive", "$", list, default=[])):
        path = f"derive[{i}]"
        if not isinstance(raw, dict):
            raise PlanParseError(path, "an object")
        _require(raw, path, {"as": str, "expr": str})
        derive.append(DeriveSpec(
            alias=_typed(raw, "as", path, str, required=True),
            expr=parse_expr(_typed(raw, "expr", path, str, required=True)),
        ))

    sort = []
    for i, raw in enumerate(_typed(doc, "sort", "$", list, default=[])):
        path = f"sort[{i}]"
        if not isinstance(raw, dict):
            raise PlanParseError(path, "an object")
        _require(raw, path, {"by": str, "dir": str})
        sort.append(SortSpec(
            by=_typed(raw, "by", path, str, required=True),
            dir=_enum(_typed(raw, "dir", path, str, default="asc"), SORT_DIRS, f"{path}.dir"),
        ))

    limit = _typed(doc, "limit", "$", int)

    out_raw = _typed(doc, "output", "$", dict, required=True)
    _require(out_raw, "output", {"format": str, "chart_kind": str})
    fmt = _enum(_typed(out_raw, "format", "output", str, required=True), OUTPUT_FORMATS, "output.format")
    chart_kind = _typed(out_raw, "chart_kind", "output", str)
    if fmt == "chart":
        if chart_kind is None:
            raise PlanParseError("output.chart_kind", "a chart kind for chart output")
        chart_kind = _enum(chart_kind, CHART_KINDS, "output.chart_kind")
    elif chart_kind is not None:
        raise PlanParseError("output.chart_kind", "no chart_kind unless format is 'chart'", chart_kind)

    return QueryPlan(
        source=source,
        joins=tuple(joins),
        filters=tuple(filters),
        group_by=tuple(group_by),
        aggregates=tuple(aggregates),
        derive=tuple(derive),
        sort=tuple(sort),
        limit=limit,
        output=OutputSpec(format=fmt, chart_kind=chart_kind),
    )


def plan_to_dict(plan: QueryPlan) -> dict:
    doc: dict = {"source": plan.source}
    if plan.joins:
        doc["joins"] = [
            {"right": j.right, "on": [[l, r] for l, r in j.on], "kind": j.kind} for j in plan.joins
        ]
    if plan.filters:
        doc["filters"] = [
            {"col": f.col, "op": f.op, "args": [values.to_jsonable(a) for a in f.args]}
            for f in plan.filters
        ]
    if plan.group_by:
        doc["group_by"] = list(plan.group_by)
    if plan.aggregates:
        doc["aggregates"] = [{"fn": a.fn, "col": a.col, "as": a.alias} for a in plan.aggregates]
    if plan.derive:
        doc["derive"] = [{"as": d.alias, "expr": expr_to_text(d.expr)} for d in plan.derive]
    if plan.sort:
        doc["sort"] = [{"by": s.by, "dir": s.dir} for s in plan.sort]
    if plan.limit is not None:
        doc["limit"] = plan.limit
    output: dict = {"format": plan.output.format}
    if plan.output.chart_kind is not None:
        output["chart_kind"] = plan.output.chart_kind
    doc["output"] = output
    return doc


def serialize_plan(plan: QueryPlan) -> str:
    return json.dumps(plan_to_dict(plan), indent=2)


def plan_json_schema() -> dict:
    """JSON Schema for the plan grammar; the same text is embedded in
    prompts so the generator and the validator share a single definition."""
    col = {"type": "string", "description": "column name or semantic term"}
    return {
        "$schema": "http://json-schema.org/draft-07/schema#",
        "title": "query_plan",
        "type": "object",
        "additionalProperties": False,
        "required": ["source", "output"],
        "properties": {
            "source": {"type": "string", "description": "dataset name"},
            "joins": {
                "type": "array",
                "items": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["right", "on"],
                    "properties": {
                        "right": {"type": "string"},
                        "on": {
                            "type": "array",
                            "minItems": 1,
                            "items": {
                                "type": "array",
                                "minItems": 2,
                                "maxItems": 2,
                                "items": {"type": "string"},
                            },
                        },
                        "kind": {"enum": list(JOIN_KINDS), "default": "inner"},
                    },
                },
            },
            "filters": {
                "type": "array",
                "items": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["col", "op", "args"],
                    "properties": {
                        "col": col,
                        "op": {"enum": list(FILTER_OPS)},
                        "args": {
                            "type": "array",
                            "items": {"type": ["string", "number", "boolean"]},
                        },
                    },
                },
            },
            "group_by": {"type": "array", "items": col},
            "aggregates": {
                "type": "array",
                "items": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["fn", "col", "as"],
                    "properties": {
                        "fn": {"enum": list(AGG_FNS)},
                        "col": {"type": "string", "description": "column ref, or '*' for count"},
                        "as": {"type": "string"},
                    },
                },
            },
            "derive": {
                "type": "array",
                "items": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["as", "expr"],
                    "properties": {
                        "as": {"type": "string"},
                        "expr": {
                            "type": "string",
                            "description": "arithmetic over group_by columns, aggregate aliases, "
                                           "and earlier derive aliases, using + - * / and parentheses",
                        },
                    },
                },
            },
            "sort": {
                "type": "array",
                "items": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["by"],
                    "properties": {"by": {"type": "string"}, "dir": {"enum": list(SORT_DIRS)}},
                },
            },
            "limit": {"type": "integer", "minimum": 0},
            "output": {
                "type": "object",
                "additionalProperties": False,
                "required": ["format"],
                "properties": {
                    "format": {"enum": list(OUTPUT_FORMATS)},
                    "chart_kind": {"enum": list(CHART_KINDS)},
                },
            },
        },
    }


# --- verdicts ---------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    code: str
    message: str
    path: str = ""

    def to_json_dict(self) -> dict:
        return {"code": self.code, "message": self.message, "path": self.path}


@dataclass(frozen=True)
class Verdict:
    status: str  # pass | reject | abstain
    violations: tuple[Violation, ...] = ()
    reason: str | None = None
    stage: str = ""
    canonical_plan: QueryPlan | None = None

    def __post_init__(self):
        if self.status == "reject" and not self.violations:
            raise ValueError("reject requires at least one violation")
        if self.status == "abstain" and not self.reason:
            raise ValueError("abstain requires a reason")

    @property
    def ok(self) -> bool:
        return self.status == "pass"

    def to_json_dict(self) -> dict:
        return {
            "stage": self.stage,
            "status": self.status,
            "reason": self.reason,
            "violations": [v.to_json_dict() for v in self.violations],
        }


# --- validation -------------------------------------------------------------

_AGG_RESULT_KIND = {"count": KIND_INTEGER, "avg": KIND_FLOAT}
_ORDERABLE = frozenset({KIND_INTEGER, KIND_FLOAT, KIND_DATE, KIND_TIMESTAMP, KIND_TEXT})


class _Checker:
    def __init__(self, store, model):
        self.store = store
        self.model = model
        self.violations: list[Violation] = []

    def flag(self, code: str, message: str, path: str) -> None:
        self.violations.append(Violation(code=code, message=message, path=path))

    def resolve_column(self, ref: str, schema: Schema, path: str) -> Column | None:
        """Direct schema lookup first, then the semantic layer. Returns the
        concrete column or flags a violation."""
        direct = schema.find(ref)
        if direct is not None:
            return direct
        if self.model is not None:
            outcome, payload = self.model.resolve_column(ref)
            if outcome == "column":
                resolved = schema.find(payload)
                if resolved is not None:
                    return resolved
                self.flag(
                    UNKNOWN_COLUMN,
                    f"term {ref!r} maps to column {payload!r} which is not in the queried data",
                    path,
                )
                return None
            if outcome == "metric":
                self.flag(
                    UNKNOWN_COLUMN,
                    f"{ref!r} is a metric, not a column; compute it with aggregates and a derive "
                    f"using its formula",
                    path,
                )
                return None
            if outcome == "ambiguous":
                self.flag(
                    UNKNOWN_COLUMN,
                    f"term {ref!r} is ambiguous between {', '.join(payload)}; ask the user to clarify",
                    path,
                )
                return None
        self.flag(UNKNOWN_COLUMN, f"unknown column {ref!r}", path)
        return None


def _coerce_arg(arg, kind: str):
    """Coerce a JSON filter argument to the column kind; returns (ok, value)."""
    if arg is None:
        return False, None
    if kind == KIND_TEXT:
        return isinstance(arg, str), arg
    if kind == KIND_BOOLEAN:
        return isinstance(arg, bool), arg
    if kind == KIND_INTEGER:
        if isinstance(arg, bool):
            return False, None
        if isinstance(arg, int):
            return True, arg
        if isinstance(arg, float) and arg.is_integer():
            return True, int(arg)
        return False, None
    if kind == KIND_FLOAT:
        if isinstance(arg, bool):
            return False, None
        if isinstance(arg, (int, float)):
            return True, float(arg)
        return False, None
    if kind in (KIND_DATE, KIND_TIMESTAMP):
        if isinstance(arg, str) and values.parses_as(arg, kind):
            return True, values.parse_value(arg, kind)
        return False, None
    return False, None


def _static_expr_kind(expr: Expr, env: dict[str, str], checker: _Checker, path: str) -> str | None:
    """Kind of a derive expression, flagging unknown refs and non-numeric
    operands. Division always yields float."""
    if isinstance(expr, Lit):
        return KIND_INTEGER if isinstance(expr.value, int) else KIND_FLOAT
    if isinstance(expr, Ref):
        low = expr.name.lower()
        if low not in env:
            checker.flag(
                UNKNOWN_COLUMN,
                f"expression references {expr.name!r}, which is not a group_by column, "
                f"aggregate alias, or earlier derive alias",
                path,
            )
            return None
        kind = env[low]
        if kind not in NUMERIC_KINDS:
            checker.flag(TYPE_MISMATCH, f"{expr.name!r} has kind {kind}; arithmetic needs numbers", path)
            return None
        return kind
    left = _static_expr_kind(expr.left, env, checker, path)
    right = _static_expr_kind(expr.right, env, checker, path)
    if left is None or right is None:
        return None
    if expr.op == "/":
        return KIND_FLOAT
    return KIND_FLOAT if KIND_FLOAT in (left, right) else KIND_INTEGER


def validate_plan(plan: QueryPlan, store, model=None) -> Verdict:
    """Check a parsed plan against schemas and the semantic layer.

    Reports every violation (not just the first) so retry prompts carry
    complete feedback. On pass, the verdict carries a canonical plan whose
    column refs are concrete schema names and whose filter args are coerced
    to the column kinds.
    """
    checker = _Checker(store, model)
    source = store.get(plan.source)
    if source is None:
        checker.flag(UNKNOWN_DATASET, f"unknown dataset {plan.source!r}", "source")
        return Verdict(status="reject", violations=tuple(checker.violations), stage="validate")

    # Joined schema: right join-key columns are dropped (they mirror the left
    # keys); any other name collision is rejected.
    joined_cols: list[Column] = list(source.schema.columns)
    canon_joins: list[JoinSpec] = []
    for i, join in enumerate(plan.joins):
        path = f"joins[{i}]"
        right = store.get(join.right)
        if right is None:
            checker.flag(UNKNOWN_DATASET, f"unknown dataset {join.right!r}", path)
            continue
        left_schema = Schema(columns=tuple(joined_cols))
        canon_pairs = []
        right_keys: set[str] = set()
        for j, (lref, rref) in enumerate(join.on):
            pair_path = f"{path}.on[{j}]"
            lcol = checker.resolve_column(lref, left_schema, pair_path)
            rcol = checker.resolve_column(rref, right.schema, pair_path)
            if lcol is None or rcol is None:
                continue
            if lcol.kind != rcol.kind:
                checker.flag(
                    BAD_JOIN_KEYS,
                    f"join key kinds differ: {lcol.name} is {lcol.kind}, {rcol.name} is {rcol.kind}",
                    pair_path,
                )
                continue
            canon_pairs.append((lcol.name, rcol.name))
            right_keys.add(rcol.name.lower())
        existing = {c.name.lower() for c in joined_cols}
        for col in right.schema.columns:
            if col.name.lower() in right_keys:
                continue
            if col.name.lower() in existing:
                checker.flag(
                    BAD_JOIN_KEYS,
                    f"column {col.name!r} exists on both sides of the join; rename one input",
                    path,
                )
                continue
            # Joined-in time columns never displace the source time axis.
            role = ROLE_DIMENSION if col.role == ROLE_TIME else col.role
            joined_cols.append(Column(name=col.name, kind=col.kind, role=role))
        canon_joins.append(JoinSpec(right=join.right, on=tuple(canon_pairs), kind=join.kind))
    work_schema = Schema(columns=tuple(joined_cols))

    canon_filters: list[FilterSpec] = []
    for i, spec in enumerate(plan.filters):
        path = f"filters[{i}]"
        col = checker.resolve_column(spec.col, work_schema, f"{path}.col")
        if col is None:
            continue
        arity_ok = True
        if spec.op == "between" and len(spec.args) != 2:
            checker.flag(TYPE_MISMATCH, "between takes exactly 2 args", f"{path}.args")
            arity_ok = False
        elif spec.op == "in" and len(spec.args) < 1:
            checker.flag(TYPE_MISMATCH, "in takes at least 1 arg", f"{path}.args")
            arity_ok = False
        elif spec.op not in ("between", "in") and len(spec.args) != 1:
            checker.flag(TYPE_MISMATCH, f"{spec.op} takes exactly 1 arg", f"{path}.args")
            arity_ok = False
        if spec.op == "contains" and col.kind != KIND_TEXT:
            checker.flag(TYPE_MISMATCH, f"contains applies to text columns, not {col.kind}", path)
            continue
        if spec.op in ("lt", "le", "gt", "ge", "between") and col.kind not in _ORDERABLE:
            checker.flag(TYPE_MISMATCH, f"{spec.op} needs an orderable column, not {col.kind}", path)
            continue
        if not arity_ok:
            continue
        coerced = []
        ok = True
        for j, arg in enumerate(spec.args):
            good, value = _coerce_arg(arg, col.kind)
            if not good:
                checker.flag(
                    TYPE_MISMATCH,
                    f"arg {arg!r} does not fit column {col.name!r} of kind {col.kind}",
                    f"{path}.args[{j}]",
                )
                ok = False
                continue
            coerced.append(value)
        if ok:
            canon_filters.append(FilterSpec(col=col.name, op=spec.op, args=tuple(coerced)))

    canon_group: list[str] = []
    output_cols: dict[str, str] = {}  # lowered name -> kind
    output_roles: dict[str, str] = {}
    for i, ref in enumerate(plan.group_by):
        col = checker.resolve_column(ref, work_schema, f"group_by[{i}]")
        if col is None:
            continue
        if col.name.lower() in output_cols:
            checker.flag(BAD_ALIAS, f"duplicate group_by column {col.name!r}", f"group_by[{i}]")
            continue
        canon_group.append(col.name)
        output_cols[col.name.lower()] = col.kind
        output_roles[col.name.lower()] = col.role

    aliases_seen: set[str] = set()
    canon_aggs: list[AggSpec] = []
    for i, agg in enumerate(plan.aggregates):
        path = f"aggregates[{i}]"
        alias_low = agg.alias.lower()
        if alias_low in aliases_seen or alias_low in output_cols:
            checker.flag(BAD_ALIAS, f"alias {agg.alias!r} is not unique among output columns", f"{path}.as")
            continue
        aliases_seen.add(alias_low)
        if agg.col == "*":
            if agg.fn != "count":
                checker.flag(TYPE_MISMATCH, f"{agg.fn} cannot aggregate '*'", f"{path}.col")
                continue
            canon_aggsspec = AggSpec(fn="count", col="*", alias=agg.alias)
            canon_aggs.append(canon_aggsspec)
            output_cols[alias_low] = KIND_INTEGER
            output_roles[alias_low] = ROLE_MEASURE
            continue
        col = checker.resolve_column(agg.col, work_schema, f"{path}.col")
        if col is None:
            continue
        if agg.fn != "count" and col.kind not in NUMERIC_KINDS:
            checker.flag(
                TYPE_MISMATCH,
                f"{agg.fn} needs a numeric column; {col.name!r} has kind {col.kind}",
                f"{path}.col",
            )
            continue
        canon_aggs.append(AggSpec(fn=agg.fn, col=col.name, alias=agg.alias))
        output_cols[alias_low] = _AGG_RESULT_KIND.get(agg.fn, col.kind)
        output_roles[alias_low] = ROLE_MEASURE

    grouped = bool(canon_group or canon_aggs)
    if not grouped:
        # Passthrough select: every working column is an output column.
        for col in work_schema.columns:
            output_cols[col.name.lower()] = col.kind
            output_roles[col.name.lower()] = col.role

    # Canonical spelling of every name a derive may reference.
    spelling: dict[str, str] = {}
    if grouped:
        for name in canon_group:
            spelling[name.lower()] = name
    else:
        for col in work_schema.columns:
            spelling[col.name.lower()] = col.name
    for agg in canon_aggs:
        spelling[agg.alias.lower()] = agg.alias

    canon_derives: list[DeriveSpec] = []
    for i, spec in enumerate(plan.derive):
        path = f"derive[{i}]"
        alias_low = spec.alias.lower()
        if alias_low in aliases_seen or alias_low in output_cols:
            checker.flag(BAD_ALIAS, f"alias {spec.alias!r} is not unique among output columns", f"{path}.as")
            continue
        kind = _static_expr_kind(spec.expr, output_cols, checker, f"{path}.expr")
        if kind is None:
            continue
        aliases_seen.add(alias_low)
        canon_derives.append(DeriveSpec(alias=spec.alias, expr=_respell_expr(spec.expr, spelling)))
        output_cols[alias_low] = kind
        output_roles[alias_low] = ROLE_MEASURE
        spelling[alias_low] = spec.alias

    # Output column order: group_by, aggregates, derives (or passthrough).
    if grouped:
        ordered_outputs = canon_group + [a.alias for a in canon_aggs] + [d.alias for d in canon_derives]
    else:
        ordered_outputs = [c.name for c in work_schema.columns] + [d.alias for d in canon_derives]
    lowered_outputs = {name.lower(): name for name in ordered_outputs}

    canon_sort: list[SortSpec] = []
    for i, spec in enumerate(plan.sort):
        low = spec.by.lower()
        if low not in lowered_outputs:
            checker.flag(
                BAD_SORT_KEY,
                f"sort key {spec.by!r} is not an output column (have: {', '.join(ordered_outputs)})",
                f"sort[{i}].by",
            )
            continue
        canon_sort.append(SortSpec(by=lowered_outputs[low], dir=spec.dir))

    if plan.limit is not None and plan.limit < 0:
        checker.flag(BAD_LIMIT, f"limit must be >= 0, got {plan.limit}", "limit")

    if plan.output.format == "scalar":
        if plan.group_by or len(plan.aggregates) != 1 or plan.derive:
            checker.flag(
                BAD_CHART_SHAPE,
                "scalar output needs exactly one aggregate, no group_by, and no derives",
                "output",
            )
    elif plan.output.format == "chart":
        has_dimension = any(
            output_roles.get(name.lower()) in (ROLE_DIMENSION, ROLE_TIME) for name in ordered_outputs
        )
        has_numeric = any(
            output_cols.get(name.lower()) in NUMERIC_KINDS for name in ordered_outputs
        )
        if not has_dimension or not has_numeric:
            checker.flag(
                BAD_CHART_SHAPE,
                "chart output needs at least one dimension column and one numeric column",
                "output",
            )

    if checker.violations:
        return Verdict(status="reject", violations=tuple(checker.violations), stage="validate")

    canonical = QueryPlan(
        source=plan.source,
        joins=tuple(canon_joins),
        filters=tuple(canon_filters),
        group_by=tuple(canon_group),
        aggregates=tuple(canon_aggs),
        derive=tuple(canon_derives),
        sort=tuple(canon_sort),
        limit=plan.limit,
        output=plan.output,
    )
    return Verdict(status="pass", stage="validate", canonical_plan=canonical)


def _respell_expr(expr: Expr, spelling: dict[str, str]) -> Expr:
    """Rewrite refs to the canonical spelling used by output columns."""
    if isinstance(expr, Lit):
        return expr
    if isinstance(expr, Ref):
        return Ref(spelling.get(expr.name.lower(), expr.name))
    return Bin(expr.op, _respell_expr(expr.left, spelling), _respell_expr(expr.right, spelling))
