"""In-memory tabular store: CSV/JSON ingestion, schema inference, metadata.

Datasets are immutable after ingestion. The registry serializes writes and
allows concurrent lookups; replacing a dataset re-registers under the same
name.
"""

from __future__ import annotations

import csv
import io
import json
import threading
from dataclasses import dataclass, field
from datetime import date, datetime, timezone

from . import values
from .values import (
    INFERENCE_PRECEDENCE,
    KIND_DATE,
    KIND_FLOAT,
    KIND_INTEGER,
    KIND_TEXT,
    KIND_TIMESTAMP,
    NUMERIC_KINDS,
    TIME_KINDS,
)

ROLE_DIMENSION = "dimension"
ROLE_MEASURE = "measure"
ROLE_TIME = "time"


class IngestError(Exception):
    """Base class for ingestion failures."""


class EmptyInput(IngestError):
    def __init__(self, name: str):
        super().__init__(f"no data rows in input for dataset {name!r}")


class RaggedRow(IngestError):
    def __init__(self, row_index: int, expected: int, got: int):
        self.row_index = row_index
        super().__init__(
            f"row {row_index} has {got} fields, expected {expected}"
        )


class EncodingError(IngestError):
    def __init__(self, detail: str):
        super().__init__(f"input is not valid UTF-8: {detail}")


@dataclass(frozen=True)
class Column:
    name: str
    kind: str
    role: str

    def __post_init__(self):
        if self.role == ROLE_MEASURE and self.kind not in NUMERIC_KINDS:
            raise ValueError(f"measure column {self.name!r} must be numeric, got {self.kind}")
        if self.role == ROLE_TIME and self.kind not in TIME_KINDS:
            raise ValueError(f"time column {self.name!r} must be date/timestamp, got {self.kind}")


@dataclass(frozen=True)
class Schema:
    columns: tuple[Column, ...]

    def __post_init__(self):
        lowered = [c.name.lower() for c in self.columns]
        if len(set(lowered)) != len(lowered):
            raise ValueError("column names must be unique case-insensitively")
        if sum(1 for c in self.columns if c.role == ROLE_TIME) > 1:
            raise ValueError("at most one time-role column allowed")

    def find(self, name: str) -> Column | None:
        low = name.lower()
        for col in self.columns:
            if col.name.lower() == low:
                return col
        return None

    def index_of(self, name: str) -> int:
        low = name.lower()
        for i, col in enumerate(self.columns):
            if col.name.lower() == low:
                return i
        raise KeyError(name)

    def time_column(self) -> Column | None:
        for col in self.columns:
            if col.role == ROLE_TIME:
                return col
        return None

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.columns)


@dataclass(frozen=True)
class DatasetMetadata:
    source_label: str
    row_count: int
    ingested_at: datetime
    time_coverage: tuple[date, date] | None = None

    def to_json_dict(self) -> dict:
        coverage = None
        if self.time_coverage is not None:
            coverage = [self.time_coverage[0].isoformat(), self.time_coverage[1].isoformat()]
        return {
            "source_label": self.source_label,
            "row_count": self.row_count,
            "ingested_at": values.to_text(self.ingested_at),
            "time_coverage": coverage,
        }


@dataclass(frozen=True)
class Dataset:
    name: str
    schema: Schema
    rows: tuple[tuple, ...]
    metadata: DatasetMetadata
    warnings: tuple[str, ...] = ()

    def column_values(self, name: str) -> list:
        idx = self.schema.index_of(name)
        return [row[idx] for row in self.rows]


def infer_column(samples: list[str], hint: str | None = None) -> tuple[str, str]:
    """Pick (kind, role) for a column from its text samples.

    Precedence: boolean, integer, float, date, timestamp, text. A kind wins
    only if every non-empty sample parses as it; empty samples are nulls and
    carry no evidence. An explicit hint overrides inference.
    """
    if hint is not None:
        return hint, _role_for(hint)
    non_empty = [s for s in samples if s != ""]
    if not non_empty:
        return KIND_TEXT, ROLE_DIMENSION
    for kind in INFERENCE_PRECEDENCE:
        if all(values.parses_as(s, kind) for s in non_empty):
            return kind, _role_for(kind)
    return KIND_TEXT, ROLE_DIMENSION


def _role_for(kind: str) -> str:
    if kind in TIME_KINDS:
        return ROLE_TIME
    if kind in NUMERIC_KINDS:
        return ROLE_MEASURE
    return ROLE_DIMENSION


def compute_metadata(
    schema: Schema, rows: list[tuple], source_label: str, now: datetime
) -> DatasetMetadata:
    """Coverage is the [min, max] of the time column ignoring nulls; absent
    when there is no time column or it is all null."""
    coverage = None
    time_col = schema.time_column()
    if time_col is not None:
        idx = schema.index_of(time_col.name)
        observed = [row[idx] for row in rows if row[idx] is not None]
        if observed:
            lo, hi = min(observed), max(observed)
            coverage = (_as_date(lo), _as_date(hi))
    return DatasetMetadata(
        source_label=source_label,
        row_count=len(rows),
        ingested_at=now,
        time_coverage=coverage,
    )


def _as_date(value) -> date:
    if isinstance(value, datetime):
        return value.astimezone(timezone.utc).date()
    return value


def _unique_headers(raw: list[str]) -> tuple[list[str], list[str]]:
    """Deduplicate case-insensitively with numeric suffixes; returns
    (headers, warnings)."""
    seen: dict[str, int] = {}
    out: list[str] = []
    warnings: list[str] = []
    for name in raw:
        base = name.strip() or "column"
        key = base.lower()
        if key not in seen:
            seen[key] = 1
            out.append(base)
            continue
        seen[key] += 1
        while f"{key}_{seen[key]}" in seen:
            seen[key] += 1
        suffixed = f"{base}_{seen[key]}"
        seen[suffixed.lower()] = 1
        warnings.append(f"duplicate header {base!r} renamed to {suffixed!r}")
        out.append(suffixed)
    return out, warnings


def _build_dataset(
    name: str,
    headers: list[str],
    cells: list[list[str]],
    type_hints: dict[str, str] | None,
    source_label: str,
    now: datetime | None,
    warnings: list[str],
) -> Dataset:
    hints = {k.lower(): v for k, v in (type_hints or {}).items()}
    columns: list[Column] = []
    time_seen = False
    for i, header in enumerate(headers):
        samples = [row[i] for row in cells]
        kind, role = infer_column(samples, hints.get(header.lower()))
        if role == ROLE_TIME:
            if time_seen:
                # Only the first time-kind column is the time axis.
                role = ROLE_DIMENSION
            else:
                time_seen = True
        columns.append(Column(name=header, kind=kind, role=role))
    schema = Schema(columns=tuple(columns))

    rows: list[tuple] = []
    for raw in cells:
        row = []
        for col, token in zip(columns, raw):
            if token == "" and col.kind != KIND_TEXT:
                row.append(None)
            else:
                row.append(values.parse_value(token, col.kind))
        rows.append(tuple(row))

    stamp = now if now is not None else datetime.now(timezone.utc)
    metadata = compute_metadata(schema, rows, source_label, stamp)
    return Dataset(
        name=name,
        schema=schema,
        rows=tuple(rows),
        metadata=metadata,
        warnings=tuple(warnings),
    )


def ingest_csv(
    data: bytes | str,
    name: str,
    *,
    delimiter: str = ",",
    has_header: bool = True,
    type_hints: dict[str, str] | None = None,
    source_label: str = "",
    now: datetime | None = None,
) -> Dataset:
    """Ingest RFC 4180 CSV bytes into an immutable Dataset.

    Raises EmptyInput when there are no data rows, RaggedRow on arity
    mismatch (1-based data row index), EncodingError on bad UTF-8.
    """
    if len(delimiter) != 1:
        raise ValueError("delimiter must be a single character")
    if isinstance(data, bytes):
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise EncodingError(str(exc)) from exc
    else:
        text = data
    reader = csv.reader(io.StringIO(text, newline=""), delimiter=delimiter)
    records = [row for row in reader if row]
    if not records:
        raise EmptyInput(name)

    warnings: list[str] = []
    if has_header:
        headers, warnings = _unique_headers(records[0])
        body = records[1:]
    else:
        headers = [f"col_{i + 1}" for i in range(len(records[0]))]
        body = records
    if not body:
        raise EmptyInput(name)

    width = len(headers)
    for i, row in enumerate(body):
        if len(row) != width:
            raise RaggedRow(i + 1, width, len(row))

    return _build_dataset(name, headers, body, type_hints, source_label, now, warnings)


def ingest_json(
    data: bytes | str,
    name: str,
    *,
    type_hints: dict[str, str] | None = None,
    source_label: str = "",
    now: datetime | None = None,
) -> Dataset:
    """Ingest a JSON array of flat objects; keys become columns in first-seen
    order and run through the same inference as CSV. JSON null is an empty
    cell."""
    if isinstance(data, bytes):
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise EncodingError(str(exc)) from exc
    else:
        text = data
    try:
        parsed = json.loads(text)
    except json.JSONDecodeError as exc:
        raise IngestError(f"invalid JSON: {exc}") from exc
    if not isinstance(parsed, list) or not all(isinstance(r, dict) for r in parsed):
        raise IngestError("JSON input must be an array of flat objects")
    if not parsed:
        raise EmptyInput(name)

    headers: list[str] = []
    for record in parsed:
        for key in record:
            if key not in headers:
                headers.append(key)
    cells = [[_json_scalar_text(record.get(key)) for key in headers] for record in parsed]
    headers, warnings = _unique_headers(headers)
    return _build_dataset(name, headers, cells, type_hints, source_label, now, warnings)


def _json_scalar_text(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (dict, list)):
        raise IngestError("JSON objects must be flat (no nested values)")
    return str(value)


def to_csv(dataset: Dataset, *, delimiter: str = ",") -> str:
    """Serialize with RFC 4180 quoting; re-ingesting with the same options
    yields value-identical rows and schema."""
    out = io.StringIO()
    writer = csv.writer(out, delimiter=delimiter, lineterminator="\n")
    writer.writerow(dataset.schema.names)
    for row in dataset.rows:
        writer.writerow([values.to_text(cell) for cell in row])
    return out.getvalue()


class DatasetRegistry:
    """Name-keyed dataset store. Writes are serialized; reads are lock-free
    (datasets themselves are immutable)."""

    def __init__(self):
        self._lock = threading.Lock()
        self._datasets: dict[str, Dataset] = {}

    def register(self, dataset: Dataset) -> None:
        with self._lock:
            self._datasets[dataset.name] = dataset

    def get(self, name: str) -> Dataset | None:
        return self._datasets.get(name)

    def names(self) -> list[str]:
        return sorted(self._datasets)

    def all(self) -> list[Dataset]:
        return [self._datasets[name] for name in self.names()]

    def subset(self, names: list[str]) -> "DatasetRegistry":
        view = DatasetRegistry()
        for name in names:
            dataset = self.get(name)
            if dataset is None:
                raise KeyError(name)
            view.register(dataset)
        return view
