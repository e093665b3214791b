"""Guarded answer flow: screen, contextualize, prompt, obtain a structured
plan, validate, check preconditions, execute, narrate, ground.

Abstention dominance is the load-bearing property: any reject or abstain
verdict at any stage produces an abstained envelope, and answered envelopes
carry a grounding report tied to the executed result. Disabling layers
reproduces baseline behavior for evaluation.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, replace

from . import claims, rules as rules_mod, semantics
from .executor import ExecutionFault, RenderedAnswer, ShapeMismatch, execute, render_output
from .llm import LlmExchange, TransportError
from .plans import (
    PlanParseError,
    QueryPlan,
    Verdict,
    Violation,
    parse_plan,
    plan_json_schema,
    plan_to_dict,
    validate_plan,
)
from .prompts import PromptBundle, baseline_prompt, build_prompt
from .rules import RuleSet, audit_answer, check_preconditions, screen_query
from .semantics import SemanticModel
from .values import KIND_TEXT, display

VALIDATION_EXHAUSTED = "VALIDATION_EXHAUSTED"
PROVIDER_UNAVAILABLE = "PROVIDER_UNAVAILABLE"
MODEL_DECLINED = "MODEL_DECLINED"
AUDIT_FAILED = "AUDIT_FAILED"
UNGROUNDED_ANSWER = "UNGROUNDED_ANSWER"
INTERNAL_ERROR = "INTERNAL_ERROR"


@dataclass(frozen=True)
class PipelineConfig:
    max_retries: int = 2
    structured_output: bool = True
    strict_rules: bool = True
    prompt_enhancement: bool = True
    semantic_layer: bool = True
    narration: str = "template"  # template | llm
    deterministic_timing: bool = True

    def to_json_dict(self) -> dict:
        return {
            "max_retries": self.max_retries,
            "structured_output": self.structured_output,
            "strict_rules": self.strict_rules,
            "prompt_enhancement": self.prompt_enhancement,
            "semantic_layer": self.semantic_layer,
            "narration": self.narration,
        }

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_json_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]

    @classmethod
    def from_json_dict(cls, doc: dict) -> "PipelineConfig":
        base = cls()
        return cls(
            max_retries=int(doc.get("max_retries", base.max_retries)),
            structured_output=bool(doc.get("structured_output", base.structured_output)),
            strict_rules=bool(doc.get("strict_rules", base.strict_rules)),
            prompt_enhancement=bool(doc.get("prompt_enhancement", base.prompt_enhancement)),
            semantic_layer=bool(doc.get("semantic_layer", base.semantic_layer)),
            narration=str(doc.get("narration", base.narration)),
        )


BASELINE_CONFIG = PipelineConfig(
    structured_output=False,
    strict_rules=False,
    prompt_enhancement=False,
    semantic_layer=False,
)


@dataclass(frozen=True)
class GroundingClaim:
    kind: str  # numeric | term | url
    surface: str
    matched: bool
    target: str = ""

    def to_json_dict(self) -> dict:
        return {"kind": self.kind, "surface": self.surface, "matched": self.matched, "target": self.target}


@dataclass(frozen=True)
class GroundingReport:
    claims: tuple[GroundingClaim, ...]

    @property
    def grounded(self) -> bool:
        return all(c.matched for c in self.claims)

    def unmatched(self) -> list[GroundingClaim]:
        return [c for c in self.claims if not c.matched]

    def to_json_dict(self) -> dict:
        return {"grounded": self.grounded, "claims": [c.to_json_dict() for c in self.claims]}


@dataclass(frozen=True)
class AnswerEnvelope:
    status: str  # answered | abstained
    answer: str | None = None
    reason: str | None = None
    plan: QueryPlan | None = None
    rendered: RenderedAnswer | None = None
    verdicts: tuple[Verdict, ...] = ()
    exchanges: tuple[LlmExchange, ...] = ()
    grounding: GroundingReport | None = None
    timing_ms: float = 0.0

    def to_json_dict(self) -> dict:
        return {
            "status": self.status,
            "answer": self.answer,
            "reason": self.reason,
            "plan": plan_to_dict(self.plan) if self.plan is not None else None,
            "result": self.rendered.result.to_json_dict() if self.rendered is not None else None,
            "chart": self.rendered.chart.to_json_dict()
            if self.rendered is not None and self.rendered.chart is not None
            else None,
            "verdicts": [v.to_json_dict() for v in self.verdicts],
            "exchanges": [e.to_json_dict() for e in self.exchanges],
            "grounding": self.grounding.to_json_dict() if self.grounding is not None else None,
            "timing_ms": self.timing_ms,
        }


def narrate(rendered: RenderedAnswer) -> str:
    """Deterministic sentence derived only from the rendered result, so the
    narration is grounded by construction."""
    result = rendered.result
    if rendered.kind == "scalar":
        name = result.columns[0].name
        return f"The {name} is {display(rendered.scalar)}."
    if rendered.kind == "chart":
        chart = rendered.chart
        series = ", ".join(name for name, _ in chart.series)
        return f"A {chart.kind} chart of {series} by {chart.x_name}."
    if not result.rows:
        return "No rows matched the request."
    first = result.rows[0]
    parts = [f"{col.name} {display(cell)}" for col, cell in zip(result.columns, first) if cell is not None]
    summary = ", ".join(parts)
    noun = "row" if len(result.rows) == 1 else "rows"
    return f"Top of {_count_word(len(result.rows))} {noun}: {summary}."


_COUNT_WORDS = {
    1: "one", 2: "two", 3: "three", 4: "four", 5: "five", 6: "six", 7: "seven",
    8: "eight", 9: "nine", 10: "ten",
}


def _count_word(n: int) -> str:
    return _COUNT_WORDS.get(n, "many")


def ground_answer(
    answer: str,
    rendered: RenderedAnswer | None,
    store,
    model: SemanticModel | None,
) -> GroundingReport:
    """Extract claims from the answer and match each against the executed
    result, the schemas, and the semantic vocabulary."""
    result_cells: list = []
    result_columns: set[str] = set()
    text_values: set[str] = set()
    if rendered is not None:
        for row in rendered.result.rows:
            result_cells.extend(row)
        result_columns = {c.name.lower() for c in rendered.result.columns}
        for idx, col in enumerate(rendered.result.columns):
            if col.kind == KIND_TEXT:
                for row in rendered.result.rows:
                    if row[idx] is not None:
                        text_values.add(row[idx].lower())

    schema_columns: set[str] = set()
    for dataset in store.all():
        for col in dataset.schema.columns:
            schema_columns.add(col.name.lower())
        for idx, col in enumerate(dataset.schema.columns):
            if col.kind == KIND_TEXT:
                for row in dataset.rows:
                    if row[idx] is not None:
                        text_values.add(row[idx].lower())

    vocabulary: set[str] = set(model.vocabulary()) if model is not None else set()

    out: list[GroundingClaim] = []
    for surface, value in claims.extract_numbers(answer):
        matched = any(claims.matches_cell(value, cell) for cell in result_cells)
        out.append(GroundingClaim(kind="numeric", surface=surface, matched=matched,
                                  target="result cell" if matched else ""))
    for ident in claims.extract_identifiers(answer):
        low = ident.lower()
        matched = low in result_columns or low in schema_columns or low in vocabulary
        out.append(GroundingClaim(kind="term", surface=ident, matched=matched,
                                  target="column" if matched else ""))
    for phrase in claims.extract_capitalized_phrases(answer):
        low = phrase.lower()
        matched = low in text_values or low in vocabulary
        out.append(GroundingClaim(kind="term", surface=phrase, matched=matched,
                                  target="data value" if matched else ""))
    for url in claims.extract_urls(answer):
        matched = url.lower() in text_values
        out.append(GroundingClaim(kind="url", surface=url, matched=matched,
                                  target="data value" if matched else ""))
    return GroundingReport(claims=tuple(out))


def _parse_abstention(text: str) -> str | None:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError:
        return None
    if isinstance(doc, dict) and set(doc) == {"abstain"} and isinstance(doc["abstain"], str):
        return doc["abstain"]
    return None


def _render_feedback(attempt_error: str) -> str:
    return "previous attempt failed validation:\n" + attempt_error


def _violations_text(verdict: Verdict) -> str:
    return "\n".join(f"- [{v.code}] at {v.path}: {v.message}" for v in verdict.violations)


_NARRATION_SYSTEM = (
    "Summarize the query result for the analyst in one or two sentences. "
    "Mention only values present in the result."
)


class Pipeline:
    """One configured guarded pipeline; immutable and safe for concurrent
    answer() calls."""

    def __init__(
        self,
        store,
        model: SemanticModel | None,
        ruleset: RuleSet,
        provider,
        config: PipelineConfig = PipelineConfig(),
    ):
        self.store = store
        self.model = model if model is not None else semantics.empty_model()
        self.ruleset = ruleset
        self.provider = provider
        self.config = config
        self.grammar_text = json.dumps(plan_json_schema(), indent=2, sort_keys=True)

    # -- envelope helpers ---------------------------------------------------

    def _finish(self, started: float | None, envelope: AnswerEnvelope) -> AnswerEnvelope:
        if started is None or self.config.deterministic_timing:
            return envelope
        return replace(envelope, timing_ms=(time.monotonic() - started) * 1000.0)

    # -- main flow ------------------------------------------------------------

    def answer(self, query: str, now) -> AnswerEnvelope:
        started = None if self.config.deterministic_timing else time.monotonic()
        verdicts: list[Verdict] = []
        exchanges: list[LlmExchange] = []

        if self.config.strict_rules:
            screened = screen_query(query, self.ruleset)
            verdicts.append(screened)
            if not screened.ok:
                return self._finish(started, AnswerEnvelope(
                    status="abstained",
                    reason=screened.violations[0].code,
                    verdicts=tuple(verdicts),
                ))

        semantic_on = self.config.semantic_layer
        hints = semantics.apply_rules(self.model, query) if semantic_on else []
        context = semantics.render_context(self.model, self.store.all()) if semantic_on else ""

        if not self.config.structured_output:
            return self._baseline(query, now, verdicts, exchanges, hints, context, started)

        metadata = [(d.name, d.metadata) for d in self.store.all()]
        bundle = build_prompt(
            query=query,
            semantic_context=context,
            metadata=metadata if self.config.prompt_enhancement else [],
            now=now,
            hints=hints,
            grammar_text=self.grammar_text,
        )
        if not self.config.prompt_enhancement:
            bundle = replace(
                bundle,
                context_blocks=tuple(
                    (label, text) for label, text in bundle.context_blocks
                    if label not in ("metadata", "dates")
                ),
            )

        canonical: QueryPlan | None = None
        accepted: QueryPlan | None = None
        feedback: str | None = None
        for attempt in range(1 + self.config.max_retries):
            attempt_bundle = bundle
            if feedback is not None:
                attempt_bundle = replace(
                    bundle, context_blocks=bundle.context_blocks + (("feedback", feedback),)
                )
            try:
                exchange = self.provider.complete(attempt_bundle, attempt)
            except TransportError:
                return self._finish(started, AnswerEnvelope(
                    status="abstained",
                    reason=PROVIDER_UNAVAILABLE,
                    verdicts=tuple(verdicts),
                    exchanges=tuple(exchanges),
                ))
            exchanges.append(exchange)

            declined = _parse_abstention(exchange.text)
            if declined is not None:
                verdicts.append(Verdict(status="abstain", reason=declined, stage="generate"))
                return self._finish(started, AnswerEnvelope(
                    status="abstained",
                    reason=MODEL_DECLINED,
                    answer=None,
                    verdicts=tuple(verdicts),
                    exchanges=tuple(exchanges),
                ))

            try:
                plan = parse_plan(exchange.text)
            except PlanParseError as exc:
                verdicts.append(Verdict(
                    status="reject",
                    violations=(Violation(code="PARSE_ERROR", message=str(exc), path="response"),),
                    stage="parse",
                ))
                feedback = _render_feedback(f"- [PARSE_ERROR] {exc}")
                continue

            verdict = validate_plan(plan, self.store, self.model if semantic_on else None)
            verdicts.append(verdict)
            if verdict.ok:
                accepted = plan
                canonical = verdict.canonical_plan
                break
            feedback = _render_feedback(_violations_text(verdict))

        if canonical is None:
            return self._finish(started, AnswerEnvelope(
                status="abstained",
                reason=VALIDATION_EXHAUSTED,
                verdicts=tuple(verdicts),
                exchanges=tuple(exchanges),
            ))

        if self.config.strict_rules:
            gate = check_preconditions(canonical, self.store, self.ruleset)
            verdicts.append(gate)
            if not gate.ok:
                reason = gate.reason or (gate.violations[0].code if gate.violations else "REJECTED")
                return self._finish(started, AnswerEnvelope(
                    status="abstained",
                    reason=reason,
                    plan=accepted,
                    verdicts=tuple(verdicts),
                    exchanges=tuple(exchanges),
                ))

        try:
            result = execute(canonical, self.store)
            rendered = render_output(result, canonical.output)
        except (ExecutionFault, ShapeMismatch) as exc:
            verdicts.append(Verdict(
                status="reject",
                violations=(Violation(code=INTERNAL_ERROR, message=str(exc), path="execute"),),
                stage="execute",
            ))
            return self._finish(started, AnswerEnvelope(
                status="abstained",
                reason=INTERNAL_ERROR,
                plan=accepted,
                verdicts=tuple(verdicts),
                exchanges=tuple(exchanges),
            ))

        answer_text = narrate(rendered)
        if self.config.narration == "llm":
            narration_bundle = PromptBundle(
                system_text=_NARRATION_SYSTEM,
                context_blocks=(("result", json.dumps(rendered.result.to_json_dict())),),
                user_query=query,
            )
            try:
                narration_exchange = self.provider.complete(narration_bundle, 0)
            except TransportError:
                return self._finish(started, AnswerEnvelope(
                    status="abstained",
                    reason=PROVIDER_UNAVAILABLE,
                    plan=accepted,
                    verdicts=tuple(verdicts),
                    exchanges=tuple(exchanges),
                ))
            exchanges.append(narration_exchange)
            candidate = narration_exchange.text
            audit = audit_answer(
                candidate, rendered.result, self.store,
                self.ruleset if self.config.strict_rules else rules_mod.empty_rules(),
            )
            audit_verdict = Verdict(
                status="reject" if audit else "pass",
                violations=tuple(
                    Violation(code=a.code, message=a.detail, path=a.claim) for a in audit
                ),
                stage="audit",
            )
            verdicts.append(audit_verdict)
            if audit:
                return self._finish(started, AnswerEnvelope(
                    status="abstained",
                    reason=AUDIT_FAILED,
                    plan=accepted,
                    verdicts=tuple(verdicts),
                    exchanges=tuple(exchanges),
                ))
            grounding = ground_answer(candidate, rendered, self.store, self.model if semantic_on else None)
            if not grounding.grounded:
                return self._finish(started, AnswerEnvelope(
                    status="abstained",
                    reason=UNGROUNDED_ANSWER,
                    plan=accepted,
                    verdicts=tuple(verdicts),
                    exchanges=tuple(exchanges),
                    grounding=grounding,
                ))
            answer_text = candidate

        grounding = ground_answer(answer_text, rendered, self.store, self.model if semantic_on else None)
        return self._finish(started, AnswerEnvelope(
            status="answered",
            answer=answer_text,
            plan=accepted,
            rendered=rendered,
            verdicts=tuple(verdicts),
            exchanges=tuple(exchanges),
            grounding=grounding,
        ))

    # -- baseline emulation ---------------------------------------------------

    def _baseline(self, query, now, verdicts, exchanges, hints, context, started) -> AnswerEnvelope:
        bundle = baseline_prompt(query)
        blocks: list[tuple[str, str]] = []
        if self.config.prompt_enhancement:
            from .prompts import render_metadata_block

            metadata = [(d.name, d.metadata) for d in self.store.all()]
            if metadata:
                blocks.append(("metadata", render_metadata_block(metadata)))
        if context:
            blocks.append(("semantics", context))
        if hints:
            blocks.append(("hints", "\n".join(f"{h.kind}: {h.payload}" for h in hints)))
        if blocks:
            bundle = replace(bundle, context_blocks=tuple(blocks))

        try:
            exchange = self.provider.complete(bundle, 0)
        except TransportError:
            return self._finish(started, AnswerEnvelope(
                status="abstained",
                reason=PROVIDER_UNAVAILABLE,
                verdicts=tuple(verdicts),
                exchanges=tuple(exchanges),
            ))
        exchanges.append(exchange)
        text = exchange.text

        declined = _parse_abstention(text)
        if declined is not None:
            verdicts.append(Verdict(status="abstain", reason=declined, stage="generate"))
            return self._finish(started, AnswerEnvelope(
                status="abstained",
                reason=MODEL_DECLINED,
                verdicts=tuple(verdicts),
                exchanges=tuple(exchanges),
            ))

        if self.config.strict_rules:
            audit = audit_answer(text, None, self.store, self.ruleset)
            audit_verdict = Verdict(
                status="reject" if audit else "pass",
                violations=tuple(
                    Violation(code=a.code, message=a.detail, path=a.claim) for a in audit
                ),
                stage="audit",
            )
            verdicts.append(audit_verdict)
            if audit:
                return self._finish(started, AnswerEnvelope(
                    status="abstained",
                    reason=AUDIT_FAILED,
                    verdicts=tuple(verdicts),
                    exchanges=tuple(exchanges),
                ))

        return self._finish(started, AnswerEnvelope(
            status="answered",
            answer=text,
            verdicts=tuple(verdicts),
            exchanges=tuple(exchanges),
        ))


def answer_query(
    query: str,
    store,
    model: SemanticModel | None,
    ruleset: RuleSet,
    provider,
    now,
    config: PipelineConfig = PipelineConfig(),
) -> AnswerEnvelope:
    return Pipeline(store, model, ruleset, provider, config).answer(query, now)
