"""Offline evaluation harness: labeled query suites across the eight query
categories, outcome classification, and the hallucination/accuracy/
precision/recall metrics.

Outcome mapping (pinned so precision/recall are reproducible):
true positives are correct answers; false positives are hallucinated or
incorrect answers; false negatives are abstentions on answerable cases.
Hallucination rate is hallucinated/total and accuracy is correct/total,
both as percentages.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import date

from . import claims
from .executor import RenderedAnswer
from .llm import FaultProfile, Script, ScriptedProvider
from .pipeline import AnswerEnvelope, Pipeline, PipelineConfig
from .rules import RuleSet
from .semantics import SemanticModel

CATEGORIES = (
    "data_aggregation",
    "calculated_metrics",
    "data_comparison",
    "relational_operations",
    "large_datasets",
    "table_output",
    "chart_output",
    "reasoning",
)

CORRECT_ANSWER = "correct_answer"
HALLUCINATED = "hallucinated"
INCORRECT = "incorrect_ungrounded_free"
CORRECT_ABSTAIN = "correct_abstain"
WRONG_ABSTAIN = "wrong_abstain"

OUTCOMES = (CORRECT_ANSWER, HALLUCINATED, INCORRECT, CORRECT_ABSTAIN, WRONG_ABSTAIN)


class SuiteError(Exception):
    pass


class UnknownCategory(SuiteError):
    def __init__(self, category: str):
        super().__init__(f"unknown category {category!r}; expected one of {list(CATEGORIES)}")


@dataclass(frozen=True)
class Gold:
    kind: str  # table | scalar | abstain
    columns: tuple[str, ...] = ()
    rows: tuple[tuple, ...] = ()
    value: object = None
    tolerance: dict = field(default_factory=dict)

    def numeric_values(self) -> list[float]:
        out = []
        if self.kind == "scalar" and isinstance(self.value, (int, float)) and not isinstance(self.value, bool):
            out.append(float(self.value))
        for row in self.rows:
            for cell in row:
                if isinstance(cell, (int, float)) and not isinstance(cell, bool):
                    out.append(float(cell))
        return out

    def text_values(self) -> set[str]:
        out = set()
        if self.kind == "scalar" and isinstance(self.value, str):
            out.add(self.value.lower())
        for row in self.rows:
            for cell in row:
                if isinstance(cell, str):
                    out.add(cell.lower())
        return out


@dataclass(frozen=True)
class EvalCase:
    id: str
    category: str
    query: str
    now: date
    datasets: tuple[str, ...]
    gold: Gold
    tag: str = ""  # suite-specific grouping, e.g. adversarial kind


def _parse_gold(raw: dict, case_id: str) -> Gold:
    kind = raw.get("kind")
    if kind == "abstain":
        return Gold(kind="abstain")
    if kind == "scalar":
        if "value" not in raw:
            raise SuiteError(f"case {case_id}: scalar gold needs a value")
        return Gold(kind="scalar", value=raw["value"], tolerance=dict(raw.get("tolerance", {})))
    if kind == "table":
        columns = raw.get("columns")
        rows = raw.get("rows")
        if not isinstance(columns, list) or not isinstance(rows, list):
            raise SuiteError(f"case {case_id}: table gold needs columns and rows")
        return Gold(
            kind="table",
            columns=tuple(columns),
            rows=tuple(tuple(r) for r in rows),
            tolerance=dict(raw.get("tolerance", {})),
        )
    raise SuiteError(f"case {case_id}: unknown gold kind {kind!r}")


def load_suite(text: str) -> list[EvalCase]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SuiteError(f"invalid suite JSON at {exc.pos}: {exc.msg}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("cases"), list):
        raise SuiteError("suite document must be an object with a 'cases' array")
    cases: list[EvalCase] = []
    for i, raw in enumerate(doc["cases"]):
        case_id = str(raw.get("id", i))
        category = raw.get("category", "")
        if category not in CATEGORIES:
            raise UnknownCategory(category)
        try:
            now = date.fromisoformat(raw["now"])
        except (KeyError, ValueError) as exc:
            raise SuiteError(f"case {case_id}: bad or missing 'now'") from exc
        cases.append(EvalCase(
            id=case_id,
            category=category,
            query=str(raw["query"]),
            now=now,
            datasets=tuple(raw.get("datasets", [])),
            gold=_parse_gold(raw.get("gold", {}), case_id),
            tag=str(raw.get("tag", "")),
        ))
    return cases


# --- gold comparison ---------------------------------------------------------

_DEFAULT_REL_TOL = 1e-9


def _cell_matches(result_cell, gold_cell, rel_tol: float) -> bool:
    if gold_cell is None or result_cell is None:
        return gold_cell is None and result_cell is None
    if isinstance(gold_cell, bool) or isinstance(result_cell, bool):
        return gold_cell == result_cell
    if isinstance(gold_cell, (int, float)) and isinstance(result_cell, (int, float)):
        if isinstance(gold_cell, int) and isinstance(result_cell, int):
            return gold_cell == result_cell
        return claims.numbers_close(float(result_cell), float(gold_cell), rel_tol)
    from .values import to_jsonable

    return to_jsonable(result_cell) == gold_cell


def result_matches_gold(rendered: RenderedAnswer, gold: Gold) -> bool:
    result = rendered.result
    if gold.kind == "scalar":
        if len(result.rows) != 1 or len(result.columns) != 1:
            return False
        return _cell_matches(result.rows[0][0], gold.value, _DEFAULT_REL_TOL)
    if gold.kind != "table":
        return False
    names = [c.name.lower() for c in result.columns]
    if names != [c.lower() for c in gold.columns]:
        return False
    if len(result.rows) != len(gold.rows):
        return False
    for result_row, gold_row in zip(result.rows, gold.rows):
        for col, result_cell, gold_cell in zip(result.columns, result_row, gold_row):
            rel = float(gold.tolerance.get(col.name, gold.tolerance.get(col.name.lower(), _DEFAULT_REL_TOL)))
            if not _cell_matches(result_cell, gold_cell, rel):
                return False
    return True


# --- outcome classification ---------------------------------------------------

def _audit_flagged(envelope: AnswerEnvelope) -> bool:
    for verdict in envelope.verdicts:
        if verdict.stage == "audit" and verdict.violations:
            return True
    return False


def _text_claims_grounded(
    answer: str,
    gold: Gold | None,
    schema_names: frozenset,
    vocabulary: frozenset,
) -> bool:
    """Grounding for answers with no executed result: numbers must match
    gold values, identifier-shaped tokens must be known vocabulary, and
    capitalized phrases must be gold values or vocabulary."""
    gold_numbers = gold.numeric_values() if gold is not None else []
    gold_text = gold.text_values() if gold is not None else set()
    for _, value in claims.extract_numbers(answer):
        if not any(
            claims.numbers_close(value, g) or claims.numbers_close(value, float(f"{g:.2f}"))
            for g in gold_numbers
        ):
            return False
    for ident in claims.extract_identifiers(answer):
        if ident.lower() not in schema_names and ident.lower() not in vocabulary:
            return False
    for phrase in claims.extract_capitalized_phrases(answer):
        low = phrase.lower()
        if low not in gold_text and low not in vocabulary:
            return False
    return True


def classify(
    envelope: AnswerEnvelope,
    gold: Gold,
    schema_names: frozenset = frozenset(),
    vocabulary: frozenset = frozenset(),
) -> str:
    """Total, mutually exclusive outcome mapping. See module docstring."""
    if gold.kind == "abstain":
        if envelope.status == "abstained":
            return CORRECT_ABSTAIN
        answer = envelope.answer or ""
        if _audit_flagged(envelope):
            return HALLUCINATED
        if envelope.grounding is not None and not envelope.grounding.grounded:
            return HALLUCINATED
        if envelope.rendered is None and not _text_claims_grounded(
            answer, None, schema_names, vocabulary
        ):
            return HALLUCINATED
        return INCORRECT

    if envelope.status == "abstained":
        return WRONG_ABSTAIN
    if _audit_flagged(envelope):
        return HALLUCINATED
    if envelope.rendered is not None:
        if envelope.grounding is not None and not envelope.grounding.grounded:
            return HALLUCINATED
        if result_matches_gold(envelope.rendered, gold):
            return CORRECT_ANSWER
        return INCORRECT

    answer = envelope.answer or ""
    if not _text_claims_grounded(answer, gold, schema_names, vocabulary):
        return HALLUCINATED
    cited = [value for _, value in claims.extract_numbers(answer)]
    if gold.kind == "scalar" and isinstance(gold.value, (int, float)) and not isinstance(gold.value, bool):
        target = float(gold.value)
        if not any(
            claims.numbers_close(v, target) or claims.numbers_close(v, float(f"{target:.2f}"))
            for v in cited
        ):
            return INCORRECT
    return CORRECT_ANSWER


# --- metrics -------------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    total: int
    tp: int
    fp: int
    fn: int
    hallucinated: int
    correct: int | None = None

    @property
    def hallucination_rate(self) -> float | None:
        return None if self.total == 0 else 100.0 * self.hallucinated / self.total

    @property
    def accuracy(self) -> float | None:
        if self.total == 0 or self.correct is None:
            return None
        return 100.0 * self.correct / self.total

    @property
    def precision(self) -> float | None:
        return None if self.tp + self.fp == 0 else 100.0 * self.tp / (self.tp + self.fp)

    @property
    def recall(self) -> float | None:
        return None if self.tp + self.fn == 0 else 100.0 * self.tp / (self.tp + self.fn)

    def to_json_dict(self) -> dict:
        return {
            "total": self.total,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "hallucinated": self.hallucinated,
            "correct": self.correct,
            "hallucination_rate": self.hallucination_rate,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
        }


def metrics_from_counts(
    tp: int, fp: int, fn: int, hallucinated: int, total: int, correct: int | None = None
) -> Metrics:
    return Metrics(total=total, tp=tp, fp=fp, fn=fn, hallucinated=hallucinated, correct=correct)


def compute_metrics(outcomes: list[str]) -> Metrics:
    counts = {name: 0 for name in OUTCOMES}
    for outcome in outcomes:
        if outcome not in counts:
            raise ValueError(f"unknown outcome {outcome!r}")
        counts[outcome] += 1
    return Metrics(
        total=len(outcomes),
        tp=counts[CORRECT_ANSWER],
        fp=counts[HALLUCINATED] + counts[INCORRECT],
        fn=counts[WRONG_ABSTAIN],
        hallucinated=counts[HALLUCINATED],
        correct=counts[CORRECT_ANSWER] + counts[CORRECT_ABSTAIN],
    )


def fmt_pct(value: float | None) -> str:
    return "n/a" if value is None else f"{value:.2f}%"


# --- suite runner ----------------------------------------------------------------

@dataclass(frozen=True)
class CaseRecord:
    case_id: str
    category: str
    tag: str
    outcome: str
    status: str
    reason: str | None

    def to_json_dict(self) -> dict:
        return {
            "id": self.case_id,
            "category": self.category,
            "tag": self.tag,
            "outcome": self.outcome,
            "status": self.status,
            "reason": self.reason,
        }


@dataclass(frozen=True)
class VariantReport:
    name: str
    config: PipelineConfig
    overall: Metrics
    categories: dict[str, Metrics]
    records: tuple[CaseRecord, ...]

    def to_json_dict(self) -> dict:
        return {
            "name": self.name,
            "config": self.config.to_json_dict(),
            "fingerprint": self.config.fingerprint(),
            "overall": self.overall.to_json_dict(),
            "categories": {cat: m.to_json_dict() for cat, m in sorted(self.categories.items())},
            "cases": [record.to_json_dict() for record in self.records],
        }


@dataclass(frozen=True)
class EvalReport:
    seed: int
    variants: tuple[VariantReport, ...]

    def variant(self, name: str) -> VariantReport:
        for report in self.variants:
            if report.name == name:
                return report
        raise KeyError(name)

    def to_json_dict(self) -> dict:
        return {"seed": self.seed, "variants": [v.to_json_dict() for v in self.variants]}

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)

    def render_markdown(self) -> str:
        lines: list[str] = []
        names = [v.name for v in self.variants]
        categories = sorted({cat for v in self.variants for cat in v.categories})
        lines.append("## Hallucination rate by category")
        lines.append("")
        header = ["category"] + names
        rows = [
            [cat] + [fmt_pct(v.categories[cat].hallucination_rate) if cat in v.categories else "n/a"
                     for v in self.variants]
            for cat in categories
        ]
        lines += _markdown_table(header, rows)
        lines.append("")
        lines.append("## Overall metrics")
        lines.append("")
        metric_rows = [
            ["hallucination rate"] + [fmt_pct(v.overall.hallucination_rate) for v in self.variants],
            ["accuracy"] + [fmt_pct(v.overall.accuracy) for v in self.variants],
            ["precision"] + [fmt_pct(v.overall.precision) for v in self.variants],
            ["recall"] + [fmt_pct(v.overall.recall) for v in self.variants],
        ]
        lines += _markdown_table(["metric"] + names, metric_rows)
        lines.append("")
        lines.append(f"seed: {self.seed}")
        return "\n".join(lines)


def _markdown_table(header: list[str], rows: list[list[str]]) -> list[str]:
    widths = [len(h) for h in header]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))

    def fmt_row(cells: list[str]) -> str:
        return "| " + " | ".join(cell.ljust(widths[i]) for i, cell in enumerate(cells)) + " |"

    out = [fmt_row(header), "| " + " | ".join("-" * w for w in widths) + " |"]
    out += [fmt_row(row) for row in rows]
    return out


class SuiteRunner:
    """Executes labeled cases through configured pipeline variants with the
    scripted provider; per-case PRNG streams keep results order-independent."""

    def __init__(
        self,
        store,
        model: SemanticModel | None,
        ruleset: RuleSet,
        script: Script,
        fault_profile: FaultProfile,
    ):
        self.store = store
        self.model = model
        self.ruleset = ruleset
        self.script = script
        self.fault_profile = fault_profile
        self._schema_names = frozenset(
            col.name.lower() for dataset in store.all() for col in dataset.schema.columns
        )
        self._vocabulary = frozenset(model.vocabulary()) if model is not None else frozenset()

    def run(self, cases: list[EvalCase], variants: dict[str, PipelineConfig], seed: int) -> EvalReport:
        profile = FaultProfile(
            fabricate_field=self.fault_profile.fabricate_field,
            fabricate_value=self.fault_profile.fabricate_value,
            speculative=self.fault_profile.speculative,
            malformed=self.fault_profile.malformed,
            seed=seed,
        )
        provider = ScriptedProvider(self.script, profile)
        reports: list[VariantReport] = []
        for name, config in variants.items():
            pipeline = Pipeline(self.store, self.model, self.ruleset, provider, config)
            records: list[CaseRecord] = []
            for case in cases:
                store = self.store if not case.datasets else self.store.subset(list(case.datasets))
                case_pipeline = pipeline
                if store is not self.store:
                    case_pipeline = Pipeline(store, self.model, self.ruleset, provider, config)
                envelope = case_pipeline.answer(case.query, case.now)
                outcome = classify(envelope, case.gold, self._schema_names, self._vocabulary)
                records.append(CaseRecord(
                    case_id=case.id,
                    category=case.category,
                    tag=case.tag,
                    outcome=outcome,
                    status=envelope.status,
                    reason=envelope.reason,
                ))
            by_category: dict[str, list[str]] = {}
            for record in records:
                by_category.setdefault(record.category, []).append(record.outcome)
            reports.append(VariantReport(
                name=name,
                config=config,
                overall=compute_metrics([r.outcome for r in records]),
                categories={cat: compute_metrics(outs) for cat, outs in by_category.items()},
                records=tuple(records),
            ))
        return EvalReport(seed=seed, variants=tuple(reports))
