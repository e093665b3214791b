"""Deterministic execution of validated query plans.

Stage order: joins, conjunctive filters, grouping (first-seen key order),
aggregates (nulls skipped), row-wise derives, stable sort (nulls last),
limit. Determinism extends to row order: pre-sort order is input order
propagated through grouping by first-seen key.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import values
from .plans import AggSpec, Expr, Lit, OutputSpec, QueryPlan, Ref
from .tabular import Column, Dataset, ROLE_DIMENSION, ROLE_MEASURE, ROLE_TIME
from .values import KIND_FLOAT, KIND_INTEGER, NUMERIC_KINDS


class ExecutionFault(Exception):
    """Invariant breach during execution; signals a validator bug, not a
    user error."""


class ShapeMismatch(Exception):
    """Requested output format does not fit the result shape."""


@dataclass(frozen=True)
class ResultTable:
    columns: tuple[Column, ...]
    rows: tuple[tuple, ...]

    def column_names(self) -> list[str]:
        return [c.name for c in self.columns]

    def index_of(self, name: str) -> int:
        low = name.lower()
        for i, col in enumerate(self.columns):
            if col.name.lower() == low:
                return i
        raise ExecutionFault(f"unknown result column {name!r}")

    def to_json_dict(self) -> dict:
        return {
            "columns": [{"name": c.name, "kind": c.kind} for c in self.columns],
            "rows": [[values.to_jsonable(cell) for cell in row] for row in self.rows],
        }


@dataclass(frozen=True)
class ChartSpec:
    kind: str
    x_name: str
    x_values: tuple
    series: tuple[tuple[str, tuple], ...]

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind,
            "x": {"name": self.x_name, "values": [values.to_jsonable(v) for v in self.x_values]},
            "series": [
                {"name": name, "values": [values.to_jsonable(v) for v in vals]}
                for name, vals in self.series
            ],
        }


@dataclass(frozen=True)
class RenderedAnswer:
    kind: str  # scalar | table | chart
    result: ResultTable
    scalar: object = None
    display_rows: tuple[tuple[str, ...], ...] = ()
    chart: ChartSpec | None = None


def eval_expr(expr: Expr, env: dict) -> object:
    """Arithmetic over bound aliases. Integer ops stay integer except '/',
    which always promotes to float. Null operands, division by zero, and
    non-finite results all yield null."""
    if isinstance(expr, Lit):
        return expr.value
    if isinstance(expr, Ref):
        key = expr.name.lower()
        if key not in env:
            raise ExecutionFault(f"unbound ref {expr.name!r}")
        return env[key]
    left = eval_expr(expr.left, env)
    right = eval_expr(expr.right, env)
    if left is None or right is None:
        return None
    if expr.op == "+":
        result = left + right
    elif expr.op == "-":
        result = left - right
    elif expr.op == "*":
        result = left * right
    elif expr.op == "/":
        if right == 0:
            return None
        result = left / right
    else:
        raise ExecutionFault(f"unknown operator {expr.op!r}")
    if isinstance(result, float) and not math.isfinite(result):
        return None
    return result


def _join(left_cols: list[Column], left_rows: list[tuple], right: Dataset, spec) -> tuple[list[Column], list[tuple]]:
    left_lookup = {c.name.lower(): i for i, c in enumerate(left_cols)}
    right_lookup = {c.name.lower(): i for i, c in enumerate(right.schema.columns)}
    try:
        left_key_idx = [left_lookup[l.lower()] for l, _ in spec.on]
        right_key_idx = [right_lookup[r.lower()] for _, r in spec.on]
    except KeyError as exc:
        raise ExecutionFault(f"join key missing: {exc}") from exc

    keep_right = [
        i for i, col in enumerate(right.schema.columns) if i not in set(right_key_idx)
    ]
    out_cols = list(left_cols)
    for i in keep_right:
        col = right.schema.columns[i]
        role = ROLE_DIMENSION if col.role == ROLE_TIME else col.role
        out_cols.append(Column(name=col.name, kind=col.kind, role=role))

    index: dict[tuple, list[tuple]] = {}
    for row in right.rows:
        key = tuple(row[i] for i in right_key_idx)
        if any(k is None for k in key):
            continue  # null keys never match
        index.setdefault(key, []).append(row)

    out_rows: list[tuple] = []
    pad = tuple(None for _ in keep_right)
    for row in left_rows:
        key = tuple(row[i] for i in left_key_idx)
        matches = [] if any(k is None for k in key) else index.get(key, [])
        if matches:
            for match in matches:
                out_rows.append(row + tuple(match[i] for i in keep_right))
        elif spec.kind == "left":
            out_rows.append(row + pad)
    return out_cols, out_rows


def _passes(cell, op: str, args: tuple) -> bool:
    if cell is None:
        return False
    if op == "eq":
        return cell == args[0]
    if op == "ne":
        return cell != args[0]
    if op == "lt":
        return cell < args[0]
    if op == "le":
        return cell <= args[0]
    if op == "gt":
        return cell > args[0]
    if op == "ge":
        return cell >= args[0]
    if op == "between":
        lo, hi = min(args), max(args)
        return lo <= cell <= hi
    if op == "in":
        return cell in args
    if op == "contains":
        return args[0].lower() in cell.lower()
    raise ExecutionFault(f"unknown filter op {op!r}")


def _aggregate(fn: str, observed: list) -> object:
    """Null cells are skipped upstream; empty input yields null except for
    count, which yields 0."""
    if fn == "count":
        return len(observed)
    if not observed:
        return None
    if fn == "sum":
        return sum(observed)
    if fn == "avg":
        total = sum(observed)
        result = total / len(observed)
        return result if math.isfinite(result) else None
    if fn == "min":
        return min(observed)
    if fn == "max":
        return max(observed)
    raise ExecutionFault(f"unknown aggregate {fn!r}")


_AGG_KIND = {"count": KIND_INTEGER, "avg": KIND_FLOAT}


def _agg_output_kind(agg: AggSpec, cols: list[Column], lookup: dict[str, int]) -> str:
    if agg.fn in _AGG_KIND:
        return _AGG_KIND[agg.fn]
    return cols[lookup[agg.col.lower()]].kind


def _static_kind(expr: Expr, kinds: dict[str, str]) -> str:
    if isinstance(expr, Lit):
        return KIND_INTEGER if isinstance(expr.value, int) else KIND_FLOAT
    if isinstance(expr, Ref):
        return kinds.get(expr.name.lower(), KIND_FLOAT)
    if expr.op == "/":
        return KIND_FLOAT
    left = _static_kind(expr.left, kinds)
    right = _static_kind(expr.right, kinds)
    return KIND_FLOAT if KIND_FLOAT in (left, right) else KIND_INTEGER


def execute(plan: QueryPlan, store) -> ResultTable:
    """Run a canonical (validated) plan against the dataset store."""
    source = store.get(plan.source)
    if source is None:
        raise ExecutionFault(f"dataset {plan.source!r} disappeared")
    cols: list[Column] = list(source.schema.columns)
    rows: list[tuple] = list(source.rows)

    for join in plan.joins:
        right = store.get(join.right)
        if right is None:
            raise ExecutionFault(f"dataset {join.right!r} disappeared")
        cols, rows = _join(cols, rows, right, join)

    lookup = {c.name.lower(): i for i, c in enumerate(cols)}
    for spec in plan.filters:
        idx = lookup.get(spec.col.lower())
        if idx is None:
            raise ExecutionFault(f"filter column {spec.col!r} missing")
        rows = [row for row in rows if _passes(row[idx], spec.op, spec.args)]

    grouped = bool(plan.group_by or plan.aggregates)
    if grouped:
        group_idx = []
        for name in plan.group_by:
            idx = lookup.get(name.lower())
            if idx is None:
                raise ExecutionFault(f"group column {name!r} missing")
            group_idx.append(idx)
        groups: dict[tuple, list[tuple]] = {}
        for row in rows:
            key = tuple(row[i] for i in group_idx)
            groups.setdefault(key, []).append(row)
        if not plan.group_by and not groups:
            groups[()] = []  # global aggregate over zero rows still yields one row

        out_cols = [cols[i] for i in group_idx]
        for agg in plan.aggregates:
            kind = _agg_output_kind(agg, cols, lookup) if agg.col != "*" else KIND_INTEGER
            out_cols.append(Column(name=agg.alias, kind=kind, role=ROLE_MEASURE))

        out_rows = []
        for key, members in groups.items():
            record = list(key)
            for agg in plan.aggregates:
                if agg.col == "*":
                    record.append(len(members))
                    continue
                idx = lookup.get(agg.col.lower())
                if idx is None:
                    raise ExecutionFault(f"aggregate column {agg.col!r} missing")
                observed = [m[idx] for m in members if m[idx] is not None]
                record.append(_aggregate(agg.fn, observed))
            out_rows.append(tuple(record))
        cols, rows = out_cols, out_rows
        lookup = {c.name.lower(): i for i, c in enumerate(cols)}

    if plan.derive:
        base_cols = list(cols)
        kinds = {c.name.lower(): c.kind for c in base_cols}
        for spec in plan.derive:
            kinds[spec.alias.lower()] = _static_kind(spec.expr, kinds)
            cols = cols + [Column(name=spec.alias, kind=kinds[spec.alias.lower()], role=ROLE_MEASURE)]
        new_rows = []
        for row in rows:
            env = {c.name.lower(): cell for c, cell in zip(base_cols, row)}
            extended = list(row)
            for spec in plan.derive:
                value = eval_expr(spec.expr, env)
                if value is not None and kinds[spec.alias.lower()] == KIND_FLOAT:
                    value = float(value)
                env[spec.alias.lower()] = value
                extended.append(value)
            new_rows.append(tuple(extended))
        rows = new_rows
        lookup = {c.name.lower(): i for i, c in enumerate(cols)}

    for spec in reversed(plan.sort):
        idx = lookup.get(spec.by.lower())
        if idx is None:
            raise ExecutionFault(f"sort key {spec.by!r} missing")
        if spec.dir == "desc":
            rows = sorted(rows, key=lambda r: (r[idx] is not None, _orderable(r[idx])), reverse=True)
        else:
            rows = sorted(rows, key=lambda r: (r[idx] is None, _orderable(r[idx])))

    if plan.limit is not None:
        rows = rows[: plan.limit]

    return ResultTable(columns=tuple(cols), rows=tuple(rows))


class _Bottom:
    """Sorts equal to itself and below nothing; placeholder for nulls whose
    position is already pinned by the is-null flag."""

    def __lt__(self, other):
        return False

    def __gt__(self, other):
        return False

    def __eq__(self, other):
        return isinstance(other, _Bottom)


_BOTTOM = _Bottom()


def _orderable(cell):
    return _BOTTOM if cell is None else cell


def prefilter_count(plan: QueryPlan, store) -> int:
    """Row count after joins and filters; used by precondition checks."""
    trimmed = QueryPlan(
        source=plan.source,
        joins=plan.joins,
        filters=plan.filters,
        output=OutputSpec("table"),
    )
    return len(execute(trimmed, store).rows)


def render_output(result: ResultTable, spec) -> RenderedAnswer:
    """Shape the result per the plan's output spec.

    scalar requires a 1x1 result; chart maps the first dimension column to
    the x axis and every numeric column to a series.
    """
    if spec.format == "scalar":
        if len(result.rows) != 1 or len(result.columns) != 1:
            raise ShapeMismatch(
                f"scalar output needs a 1x1 result, got {len(result.rows)}x{len(result.columns)}"
            )
        return RenderedAnswer(kind="scalar", result=result, scalar=result.rows[0][0])

    display_rows = tuple(tuple(values.display(cell) for cell in row) for row in result.rows)
    if spec.format == "table":
        return RenderedAnswer(kind="table", result=result, display_rows=display_rows)

    if spec.format == "chart":
        dim_idx = None
        for i, col in enumerate(result.columns):
            if col.role in (ROLE_DIMENSION, ROLE_TIME) :
                dim_idx = i
                break
        numeric_idx = [i for i, col in enumerate(result.columns) if col.kind in NUMERIC_KINDS and i != dim_idx]
        if dim_idx is None or not numeric_idx:
            raise ShapeMismatch("chart output needs one dimension column and at least one numeric column")
        chart = ChartSpec(
            kind=spec.chart_kind,
            x_name=result.columns[dim_idx].name,
            x_values=tuple(row[dim_idx] for row in result.rows),
            series=tuple(
                (result.columns[i].name, tuple(row[i] for row in result.rows)) for i in numeric_idx
            ),
        )
        return RenderedAnswer(kind="chart", result=result, display_rows=display_rows, chart=chart)

    raise ShapeMismatch(f"unknown output format {spec.format!r}")
