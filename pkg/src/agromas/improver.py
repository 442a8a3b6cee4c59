"""Final quality gate over the consolidated answer, with per-image grounding."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .answerer import ConsolidatedAnswer
from .backend import Backend, ChatMessage, ChatRequest, complete_structured
from .core import Query
from .errors import StructuredParseError

DIMENSIONS = ("completeness", "instruction_following", "visual_grounding")
FEEDBACK_CUTOFF = 0.7

JUDGE_SCHEMA: dict[str, Any] = {
    "type": "object",
    "properties": {
        "completeness": {"type": "integer"},
        "instruction_following": {"type": "integer"},
        "image_grounding": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {"image_id": {"type": "string"}, "grounded": {"type": "boolean"}},
                "required": ["image_id", "grounded"],
            },
        },
        "feedback": {"type": "string"},
    },
    "required": ["completeness", "instruction_following", "image_grounding", "feedback"],
}


class ImproveCriteria(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    completeness: float = Field(default=0.35, ge=0)
    instruction_following: float = Field(default=0.25, ge=0)
    visual_grounding: float = Field(default=0.40, ge=0)
    threshold: float = Field(default=0.7, ge=0, le=1)

    @model_validator(mode="after")
    def _some_weight(self) -> "ImproveCriteria":
        if not any(v > 0 for v in self.weights.values()):
            raise ValueError("at least one dimension weight must be > 0")
        return self

    @property
    def weights(self) -> dict[str, float]:
        return {d: getattr(self, d) for d in DIMENSIONS}


@dataclass(frozen=True)
class ImproveVerdict:
    passed: bool
    dim_scores: dict[str, float]
    per_image: dict[str, bool]
    overall: float
    feedback: str = ""
    warnings: tuple[str, ...] = field(default=())

    def to_dict(self) -> dict[str, Any]:
        return {
            "pass": self.passed,
            "dim_scores": dict(self.dim_scores),
            "per_image": dict(self.per_image),
            "overall": self.overall,
            "feedback": self.feedback,
        }


def grounding_ratio(per_image: dict[str, bool]) -> float:
    if not per_image:
        return 1.0
    return sum(per_image.values()) / len(per_image)


def verdict_from_scores(completeness: float, instruction_following: float, per_image: dict[str, bool],
                        criteria: ImproveCriteria, feedback: str = "",
                        warnings: Iterable[str] = ()) -> ImproveVerdict:
    dims = {
        "completeness": completeness,
        "instruction_following": instruction_following,
        "visual_grounding": grounding_ratio(per_image),
    }
    weights = criteria.weights
    overall = math.fsum(weights[d] * dims[d] for d in DIMENSIONS) / math.fsum(weights.values())
    return ImproveVerdict(overall >= criteria.threshold, dims, dict(per_image), overall, feedback, tuple(warnings))


JUDGE_SYSTEM = (
    "You are the Improver, the final quality reviewer. Check the answer for completeness, "
    "instruction following, and whether it is grounded in evidence from every attached image. "
    "Score completeness and instruction_following from 0 to 10 and mark each image as grounded or not. "
    "Reply with JSON only."
)


def evaluate(backend: Backend, answer: ConsolidatedAnswer, query: Query, evidence: Iterable,
             criteria: ImproveCriteria, *, model_id: str = "default", max_tokens: int = 1024) -> ImproveVerdict:
    """One judge call with all images attached. Parse failure yields a failing verdict."""
    lines = [f"Question: {query.text}"]
    if query.options:
        lines.append("Options:\n" + "\n".join(f"{o.letter}. {o.text}" for o in query.options))
    if query.images:
        lines.append("Image ids: " + ", ".join(i.id for i in query.images))
    items = list(evidence)
    if items:
        lines.append("Evidence:\n" + "\n".join(f"[{e.id}] {e.content}" for e in items))
    lines.append(f"Candidate answer: {answer.answer_text}")
    if answer.chosen_option:
        lines.append(f"Chosen option: {answer.chosen_option}")
    lines.append(f"Rationale: {answer.rationale}")
    lines.append('Respond as {"completeness": int, "instruction_following": int, '
                 '"image_grounding": [{"image_id": string, "grounded": bool}], "feedback": string}.')
    request = ChatRequest(
        model_id=model_id,
        messages=[ChatMessage.system(JUDGE_SYSTEM), ChatMessage.user("\n".join(lines), query.images)],
        temperature=0.0,
        seed=query.seed,
        max_tokens=max_tokens,
        step="improve_judge",
    )
    image_ids = [i.id for i in query.images]
    try:
        raw = complete_structured(backend, request, JUDGE_SCHEMA)
    except StructuredParseError as exc:
        note = f"judge output could not be parsed: {exc}"
        zero = {d: 0.0 for d in DIMENSIONS}
        return ImproveVerdict(False, zero, {i: False for i in image_ids}, 0.0, note, (note,))
    warnings = []
    dims = {}
    for d in ("completeness", "instruction_following"):
        value = raw[d]
        clamped = min(10, max(0, value))
        if clamped != value:
            warnings.append(f"{d} score {value} outside 0..10, clamped to {clamped}")
        dims[d] = clamped / 10
    reported = {}
    for item in raw["image_grounding"]:
        if item["image_id"] in image_ids:
            reported[item["image_id"]] = item["grounded"]
        else:
            warnings.append(f"judge reported unknown image id {item['image_id']!r}")
    per_image = {i: bool(reported.get(i, False)) for i in image_ids}
    missing = [i for i in image_ids if i not in reported]
    if missing:
        warnings.append(f"no grounding flag for {missing}; treated as ungrounded")
    return verdict_from_scores(dims["completeness"], dims["instruction_following"], per_image, criteria,
                               raw["feedback"], warnings)


def feedback_for_revision(verdict: ImproveVerdict) -> str:
    """Revision instructions naming ungrounded images and weak dimensions."""
    if verdict.passed:
        raise ValueError("feedback_for_revision requires a failing verdict")
    parts = []
    ungrounded = [i for i, ok in verdict.per_image.items() if not ok]
    if ungrounded:
        parts.append("Ground the answer in these images, which it currently ignores: " + ", ".join(ungrounded) + ".")
    weak = [d for d in ("completeness", "instruction_following") if verdict.dim_scores.get(d, 0.0) < FEEDBACK_CUTOFF]
    for d in weak:
        parts.append(f"Improve {d.replace('_', ' ')} ({d}: {verdict.dim_scores[d]:.2f}).")
    if verdict.feedback:
        parts.append(f"Reviewer notes: {verdict.feedback}")
    if not parts:
        parts.append(f"Overall quality {verdict.overall:.2f} is below the acceptance threshold; tighten the answer.")
    return " ".join(parts)
