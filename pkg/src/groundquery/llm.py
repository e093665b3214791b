"""Completion providers: a real HTTP chat-completion client and a
deterministic scripted responder with seeded fault injection.

The scripted provider is the offline stand-in for hosted models: canned
responses keyed by a fingerprint of the normalized user query, with fault
classes (fabricated fields/values, speculative answers, malformed output)
fired by PRNG streams derived from (seed, fault class, case, attempt) so
results are independent of evaluation order.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import re
import time
from dataclasses import dataclass, field

import httpx

from .prompts import PromptBundle

FABRICATE_FIELD = "FABRICATE_FIELD"
FABRICATE_VALUE = "FABRICATE_VALUE"
SPECULATIVE = "SPECULATIVE"
MALFORMED = "MALFORMED"

FAULT_ORDER = (FABRICATE_FIELD, FABRICATE_VALUE, SPECULATIVE, MALFORMED)

_SPECULATIVE_TEXT = (
    "Based on the available data, performance improved by 42.7% over the "
    "requested period, driven largely by the Northwind Relaunch campaign."
)


class TransportError(Exception):
    pass


class AuthError(Exception):
    pass


class ProviderError(Exception):
    def __init__(self, status: int, body: str):
        self.status = status
        self.body = body
        super().__init__(f"provider returned {status}: {body[:200]}")


class UnscriptedQuery(Exception):
    def __init__(self, query: str):
        super().__init__(f"no scripted response for query: {query[:80]!r}")


@dataclass(frozen=True)
class LlmExchange:
    provider: str
    attempt: int
    request: PromptBundle
    text: str
    raw_response: str
    latency_ms: float = 0.0

    def to_json_dict(self) -> dict:
        return {
            "provider": self.provider,
            "attempt": self.attempt,
            "request": self.request.to_json_dict(),
            "response": self.raw_response,
            "latency_ms": self.latency_ms,
        }


def fingerprint_query(query: str) -> str:
    normalized = re.sub(r"\s+", " ", query.strip().lower())
    return hashlib.sha256(normalized.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class FaultProfile:
    fabricate_field: float = 0.0
    fabricate_value: float = 0.0
    speculative: float = 0.0
    malformed: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("fabricate_field", "fabricate_value", "speculative", "malformed"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} probability must be in [0, 1], got {p}")

    def probability(self, fault: str) -> float:
        return {
            FABRICATE_FIELD: self.fabricate_field,
            FABRICATE_VALUE: self.fabricate_value,
            SPECULATIVE: self.speculative,
            MALFORMED: self.malformed,
        }[fault]

    @classmethod
    def from_json_dict(cls, doc: dict, seed: int | None = None) -> "FaultProfile":
        return cls(
            fabricate_field=float(doc.get("fabricate_field", 0.0)),
            fabricate_value=float(doc.get("fabricate_value", 0.0)),
            speculative=float(doc.get("speculative", 0.0)),
            malformed=float(doc.get("malformed", 0.0)),
            seed=int(doc.get("seed", 0)) if seed is None else seed,
        )


NO_FAULTS = FaultProfile()


@dataclass(frozen=True)
class ScriptEntry:
    query: str
    plan: dict | None = None
    abstain: str | None = None
    narration: str | None = None


@dataclass(frozen=True)
class Script:
    entries: dict[str, ScriptEntry] = field(default_factory=dict)

    @classmethod
    def from_json(cls, text: str) -> "Script":
        doc = json.loads(text)
        entries = {}
        for raw in doc.get("cases", []):
            entry = ScriptEntry(
                query=raw["query"],
                plan=raw.get("plan"),
                abstain=raw.get("abstain"),
                narration=raw.get("narration"),
            )
            entries[fingerprint_query(entry.query)] = entry
        return cls(entries=entries)

    def merge(self, other: "Script") -> "Script":
        merged = dict(self.entries)
        merged.update(other.entries)
        return Script(entries=merged)


def _stream(seed: int, fault: str, case_id: str, attempt: int) -> random.Random:
    digest = hashlib.sha256(f"{seed}:{fault}:{case_id}:{attempt}".encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


_IDENT_RE = re.compile(r"\b[a-z][a-z0-9]*(?:_[a-z0-9]+)+\b")
_NUMBER_RE = re.compile(r"(?<![\w.\-])\d+(?:\.\d+)?(?![\w.])")
_DATE_TOKEN_RE = re.compile(r"\d{4}-\d{2}-\d{2}")


def _fabricate_field(body: str) -> str:
    """Rename one referenced column to a name absent from every schema."""
    try:
        doc = json.loads(body)
    except json.JSONDecodeError:
        doc = None
    if isinstance(doc, dict) and "abstain" not in doc:
        for agg in doc.get("aggregates", []):
            if isinstance(agg, dict) and agg.get("col") not in (None, "*"):
                agg["col"] = f"{agg['col']}_phantom"
                return json.dumps(doc, sort_keys=True)
        group = doc.get("group_by")
        if isinstance(group, list) and group:
            group[0] = f"{group[0]}_phantom"
            return json.dumps(doc, sort_keys=True)
        for flt in doc.get("filters", []):
            if isinstance(flt, dict) and flt.get("col"):
                flt["col"] = f"{flt['col']}_phantom"
                return json.dumps(doc, sort_keys=True)
        doc["source"] = f"{doc.get('source', 'data')}_phantom"
        return json.dumps(doc, sort_keys=True)
    match = _IDENT_RE.search(body)
    if match:
        return body[: match.end()] + "_phantom" + body[match.end():]
    return body + " The metric_phantom field drove most of the change."


def _fabricate_value(body: str) -> str:
    """Perturb the first numeric token by +10%, preserving integer-ness so
    plan documents stay parseable. Date tokens are left alone."""
    date_spans = [m.span() for m in _DATE_TOKEN_RE.finditer(body)]
    match = None
    for candidate in _NUMBER_RE.finditer(body):
        if not any(lo <= candidate.start() < hi for lo, hi in date_spans):
            match = candidate
            break
    if match is None:
        return body
    token = match.group(0)
    if "." in token:
        perturbed = repr(float(token) * 1.1)
    else:
        bumped = round(int(token) * 1.1)
        perturbed = str(bumped if bumped != int(token) else int(token) + 1)
    return body[: match.start()] + perturbed + body[match.end():]


def _is_abstention(body: str) -> bool:
    try:
        doc = json.loads(body)
    except json.JSONDecodeError:
        return False
    return isinstance(doc, dict) and "abstain" in doc


def apply_faults(body: str, faults: FaultProfile, case_id: str, attempt: int) -> str:
    """Apply fault classes in fixed order, each on its own PRNG stream so
    disabling one class never changes whether the others fire."""
    for fault in FAULT_ORDER:
        p = faults.probability(fault)
        if p <= 0.0:
            continue
        if _stream(faults.seed, fault, case_id, attempt).random() >= p:
            continue
        if fault == FABRICATE_FIELD:
            body = _fabricate_field(body)
        elif fault == FABRICATE_VALUE:
            body = _fabricate_value(body)
        elif fault == SPECULATIVE:
            if _is_abstention(body):
                body = _SPECULATIVE_TEXT
        elif fault == MALFORMED:
            body = body[: int(len(body) * 0.8)]
    return body


class ScriptedProvider:
    """Deterministic test double. Plan prompts (those carrying a grammar
    block) get the scripted plan or abstention document; bare prompts get
    the scripted narration."""

    id = "scripted"

    def __init__(self, script: Script, faults: FaultProfile = NO_FAULTS):
        self.script = script
        self.faults = faults

    def complete(self, bundle: PromptBundle, attempt: int = 0) -> LlmExchange:
        case_id = fingerprint_query(bundle.user_query)
        entry = self.script.entries.get(case_id)
        if entry is None:
            raise UnscriptedQuery(bundle.user_query)
        plan_mode = bundle.block("grammar") is not None
        if plan_mode:
            if entry.plan is not None:
                body = json.dumps(entry.plan, sort_keys=True)
            else:
                body = json.dumps({"abstain": entry.abstain or "not answerable from the data"})
        else:
            if entry.narration is not None:
                body = entry.narration
            else:
                body = json.dumps({"abstain": entry.abstain or "not answerable from the data"})
        body = apply_faults(body, self.faults, case_id, attempt)
        return LlmExchange(
            provider=self.id,
            attempt=attempt,
            request=bundle,
            text=body,
            raw_response=body,
        )


class HttpProvider:
    """OpenAI-style chat-completion client. The credential comes from the
    environment variable named in the config and is checked before any
    request goes out."""

    id = "http"

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key_env: str = "LLM_API_KEY",
        timeout: float = 30.0,
        transport_retries: int = 2,
    ):
        self.endpoint = endpoint
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.transport_retries = transport_retries

    def complete(self, bundle: PromptBundle, attempt: int = 0) -> LlmExchange:
        key = os.environ.get(self.api_key_env)
        if not key:
            raise AuthError(f"credential env var {self.api_key_env} is not set")
        system = bundle.system_text
        for label, text in bundle.context_blocks:
            system += f"\n\n[{label}]\n{text}"
        payload = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": bundle.user_query},
            ],
            "temperature": bundle.temperature,
            "max_tokens": bundle.max_tokens,
        }
        headers = {"Authorization": f"Bearer {key}"}
        started = time.monotonic()
        last_error: Exception | None = None
        for retry in range(self.transport_retries + 1):
            try:
                response = httpx.post(
                    self.endpoint, json=payload, headers=headers, timeout=self.timeout
                )
                break
            except httpx.TransportError as exc:
                last_error = exc
                if retry < self.transport_retries:
                    time.sleep(0.5 * 2**retry)
        else:
            raise TransportError(str(last_error))
        latency_ms = (time.monotonic() - started) * 1000.0
        if response.status_code < 200 or response.status_code >= 300:
            raise ProviderError(response.status_code, response.text)
        try:
            text = response.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError, json.JSONDecodeError) as exc:
            raise ProviderError(response.status_code, response.text) from exc
        return LlmExchange(
            provider=self.id,
            attempt=attempt,
            request=bundle,
            text=text,
            raw_response=response.text,
            latency_ms=latency_ms,
        )
