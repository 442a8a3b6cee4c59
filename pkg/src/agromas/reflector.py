"""Evidence adequacy gate: weighted criteria scoring, threshold verdict, keyword reformulation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .backend import Backend, ChatMessage, ChatRequest, complete_structured
from .core import EvidenceSet, Query
from .tools import tokenize

CRITERIA = ("relevance", "consistency", "timeliness", "context_alignment")

JUDGE_SCHEMA: dict[str, Any] = {
    "type": "object",
    "properties": {
        **{c: {"type": "integer"} for c in CRITERIA},
        "rationale": {"type": "string"},
    },
    "required": [*CRITERIA, "rationale"],
}


class GateCriteria(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    relevance: float = Field(default=0.4, ge=0)
    consistency: float = Field(default=0.25, ge=0)
    timeliness: float = Field(default=0.15, ge=0)
    context_alignment: float = Field(default=0.2, ge=0)
    threshold: float = Field(default=0.6, ge=0, le=1)

    @model_validator(mode="after")
    def _some_weight(self) -> "GateCriteria":
        if not any(v > 0 for v in self.weights.values()):
            raise ValueError("at least one criterion weight must be > 0")
        return self

    @property
    def weights(self) -> dict[str, float]:
        return {c: getattr(self, c) for c in CRITERIA}


@dataclass(frozen=True)
class GateVerdict:
    accept: bool
    scores: dict[str, float]
    weighted_score: float
    rationale: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "accept": self.accept,
            "scores": dict(self.scores),
            "weighted_score": self.weighted_score,
            "rationale": self.rationale,
        }


@dataclass
class JudgeScores:
    scores: dict[str, float]
    rationale: str = ""
    warnings: list[str] = field(default_factory=list)
    raw: Optional[dict[str, Any]] = None
    error: Optional[str] = None


def weighted_mean(weights: dict[str, float], scores: dict[str, float]) -> float:
    total = math.fsum(weights.values())
    return math.fsum(w * scores[k] for k, w in weights.items()) / total


def gate(scores: dict[str, float], criteria: GateCriteria, rationale: str = "") -> GateVerdict:
    weights = {c: w for c, w in criteria.weights.items() if w > 0}
    missing = [c for c in weights if c not in scores]
    if missing:
        raise ValueError(f"missing scores for criteria: {missing}")
    ws = weighted_mean(weights, scores)
    return GateVerdict(
        accept=ws >= criteria.threshold,
        scores={c: scores[c] for c in CRITERIA if c in scores},
        weighted_score=ws,
        rationale=rationale,
    )


def _evidence_block(evidence: Iterable) -> str:
    return "\n".join(f"[{e.id}] ({e.source_tool}) {e.content}" for e in evidence)


JUDGE_SYSTEM = (
    "You are the Reflector. Judge whether the retrieved evidence is adequate to answer the question. "
    "Score each criterion from 0 to 10: relevance (topical relevance to the question), consistency "
    "(factual agreement across sources), timeliness (how current the data is), context_alignment "
    "(fit with crop type, growth stage and local conditions). Reply with JSON only."
)


def score_evidence(backend: Backend, evidence: EvidenceSet | Iterable, query: Query, *,
                   model_id: str = "default", include_images: bool = False,
                   max_tokens: int = 1024) -> JudgeScores:
    """Judge the evidence set as a whole; scores are normalized to [0, 1].

    Empty evidence short-circuits to all zeros without a model call. Values
    outside 0..10 are clamped with a warning.
    """
    items = list(evidence)
    if not items:
        return JudgeScores({c: 0.0 for c in CRITERIA}, rationale="no evidence retrieved")
    prompt = [f"Question: {query.text}"]
    if query.options:
        prompt.append("Options: " + "; ".join(f"{o.letter}. {o.text}" for o in query.options))
    captions = [f"{i.id}: {i.caption}" for i in query.images if i.caption]
    if captions:
        prompt.append("Image captions: " + "; ".join(captions))
    for key in ("time", "location"):
        if query.metadata.get(key):
            prompt.append(f"{key.capitalize()}: {query.metadata[key]}")
    prompt.append("Evidence:\n" + _evidence_block(items))
    prompt.append('Respond as {"relevance": int, "consistency": int, "timeliness": int, '
                  '"context_alignment": int, "rationale": string}.')
    request = ChatRequest(
        model_id=model_id,
        messages=[
            ChatMessage.system(JUDGE_SYSTEM),
            ChatMessage.user("\n".join(prompt), query.images if include_images else ()),
        ],
        temperature=0.0,
        seed=query.seed,
        max_tokens=max_tokens,
        step="reflect_judge",
    )
    raw = complete_structured(backend, request, JUDGE_SCHEMA)
    warnings = []
    scores = {}
    for c in CRITERIA:
        value = raw[c]
        clamped = min(10, max(0, value))
        if clamped != value:
            warnings.append(f"{c} score {value} outside 0..10, clamped to {clamped}")
        scores[c] = clamped / 10
    return JudgeScores(scores, rationale=raw["rationale"], warnings=warnings, raw=raw)


REFORMULATE_SYSTEM = (
    "You are the Retriever. The reviewer rejected the evidence found with the previous search. "
    "Rewrite the search keywords to fix the stated gaps. Reply with the new keywords on one line."
)


def lowest_criteria(scores: dict[str, float]) -> list[str]:
    if not scores:
        return []
    low = min(scores.values())
    return [c for c in CRITERIA if scores.get(c) == low]


def reformulate(backend: Backend, keywords: str, verdict: GateVerdict, query: Query, *,
                model_id: str = "default", temperature: float = 0.2,
                max_tokens: int = 64) -> tuple[str, Optional[str]]:
    """Return ``(new_keywords, warning)``; the output always differs from ``keywords``."""
    if verdict.accept:
        raise ValueError("reformulate called on an accepted verdict")
    weakest = lowest_criteria(verdict.scores)
    text = (
        f"Question: {query.text}\n"
        f"Previous keywords: {keywords}\n"
        f"Reviewer rationale: {verdict.rationale}\n"
        f"Weakest criteria: {', '.join(weakest)}\n"
        "New keywords:"
    )
    request = ChatRequest(
        model_id=model_id,
        messages=[ChatMessage.system(REFORMULATE_SYSTEM), ChatMessage.user(text)],
        temperature=temperature,
        seed=query.seed,
        max_tokens=max_tokens,
        step="reformulate",
    )
    out = " ".join(backend.complete(request).text.split())
    if out and out != keywords:
        return out, None
    existing = set(tokenize(keywords))
    extra = next((t for t in tokenize(verdict.rationale) if t not in existing), None)
    if extra is None:
        extra = next((t for t in weakest if t not in existing), "more")
    new = f"{keywords} {extra}".strip()
    return new, f"reformulation {'empty' if not out else 'unchanged'}; appended {extra!r}"
