"""Dual answer drafting, disagreement detection and reconsideration."""

from __future__ import annotations

import json
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Iterable, Literal, Optional

from .backend import Backend, ChatMessage, ChatRequest, complete_structured
from .core import Query
from .errors import StructuredParseError
from .tools import tokenize

PERSONAS = {
    1: "You are Answerer 1, a plant diagnostic specialist. Reason from the visible symptoms, "
       "pests and organisms in every image.",
    2: "You are Answerer 2, a field-management specialist. Reason from crop stage, local conditions "
       "and practical management options.",
}
NEUTRAL_PERSONA = "You are an agricultural expert answering a farmer's question."


@dataclass(frozen=True)
class Draft:
    answerer_id: int
    answer_text: str
    chosen_option: Optional[str] = None
    rationale: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "answerer_id": self.answerer_id,
            "answer": self.answer_text,
            "option": self.chosen_option,
            "rationale": self.rationale,
        }


@dataclass
class ConsolidatedAnswer:
    answer_text: str
    chosen_option: Optional[str] = None
    rationale: str = ""
    rounds_used: int = 0
    verified: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "answer": self.answer_text,
            "option": self.chosen_option,
            "rationale": self.rationale,
            "rounds_used": self.rounds_used,
            "verified": self.verified,
        }


@dataclass
class AnswerSettings:
    model_ids: tuple[str, str] = ("default", "default")
    temperature: float = 0.2
    max_tokens: int = 1024
    identical_prompts: bool = False
    max_reconsider_rounds: int = 2
    disagreement_mode: Literal["mcq", "free_text"] = "mcq"
    f1_threshold: float = 0.6


@dataclass
class ReconsiderResult:
    answer: ConsolidatedAnswer
    drafts: tuple[Draft, Draft]
    rounds: list[dict[str, Any]] = field(default_factory=list)


def answer_schema(query: Query) -> dict[str, Any]:
    option: dict[str, Any]
    if query.is_mcq:
        option = {"type": "string", "enum": query.letters}
    else:
        option = {"type": ["string", "null"]}
    return {
        "type": "object",
        "properties": {
            "answer": {"type": "string"},
            "option": option,
            "rationale": {"type": "string"},
        },
        "required": ["answer", "option", "rationale"],
    }


def token_f1(a: str, b: str) -> float:
    ta, tb = tokenize(a), tokenize(b)
    if not ta and not tb:
        return 1.0
    if not ta or not tb:
        return 0.0
    overlap = sum((Counter(ta) & Counter(tb)).values())
    if overlap == 0:
        return 0.0
    p, r = overlap / len(ta), overlap / len(tb)
    return 2 * p * r / (p + r)


def disagree(d1: Draft, d2: Draft, mode: str = "mcq", threshold: float = 0.6) -> bool:
    if mode == "mcq":
        if d1.chosen_option is None or d2.chosen_option is None:
            raise ValueError("mcq disagreement needs both drafts to choose an option")
        return d1.chosen_option.upper() != d2.chosen_option.upper()
    return token_f1(d1.answer_text, d2.answer_text) < threshold


def _context(query: Query, evidence: Iterable) -> str:
    lines = [f"Question: {query.text}"]
    if query.options:
        lines.append("Options:\n" + "\n".join(f"{o.letter}. {o.text}" for o in query.options))
    for key in ("time", "location"):
        if query.metadata.get(key):
            lines.append(f"{key.capitalize()}: {query.metadata[key]}")
    if query.images:
        lines.append("Images: " + ", ".join(
            f"{i.id}" + (f" ({i.caption})" if i.caption else "") for i in query.images))
    items = list(evidence)
    if items:
        lines.append("Evidence:\n" + "\n".join(f"[{e.id}] ({e.source_tool}) {e.content}" for e in items))
    else:
        lines.append("Evidence: none retrieved.")
    return "\n".join(lines)


_REPLY = ('Reply with JSON only: {"answer": string, "option": letter or null, "rationale": string}. '
          "For multiple-choice questions option must be one of the listed letters.")


def _request(query: Query, settings: AnswerSettings, answerer_id: int, text: str, step: str) -> ChatRequest:
    persona = NEUTRAL_PERSONA if settings.identical_prompts else PERSONAS[answerer_id]
    return ChatRequest(
        model_id=settings.model_ids[answerer_id - 1],
        messages=[ChatMessage.system(persona), ChatMessage.user(f"{text}\n{_REPLY}", query.images)],
        temperature=settings.temperature,
        seed=query.seed,
        max_tokens=settings.max_tokens,
        step=step,
    )


def _to_draft(answerer_id: int, raw: dict[str, Any]) -> Draft:
    option = raw["option"]
    return Draft(answerer_id, raw["answer"], option.upper() if isinstance(option, str) else None, raw["rationale"])


def _call_pair(backend: Backend, requests: dict[int, ChatRequest], schema: dict[str, Any],
               parallel: bool = True) -> dict[int, Any]:
    """Run the answerers' structured calls (concurrently) and return per-id results or exceptions."""

    def run(i: int) -> Any:
        try:
            return complete_structured(backend, requests[i], schema)
        except StructuredParseError as exc:
            return exc

    if parallel and len(requests) > 1:
        with ThreadPoolExecutor(max_workers=len(requests)) as pool:
            futures = {i: pool.submit(run, i) for i in requests}
            return {i: f.result() for i, f in futures.items()}
    return {i: run(i) for i in requests}


def _pair_with_retry(backend: Backend, requests: dict[int, ChatRequest], schema: dict[str, Any]) -> tuple[Draft, Draft]:
    results = _call_pair(backend, requests, schema)
    failed = [i for i, r in results.items() if isinstance(r, Exception)]
    if len(failed) == 2:
        raise StructuredParseError("both answerers failed to produce a valid draft",
                                   [t for r in results.values() for t in r.raw_texts])
    for i in failed:
        results[i] = complete_structured(backend, requests[i], schema)
    return _to_draft(1, results[1]), _to_draft(2, results[2])


def draft_pair(backend: Backend, query: Query, evidence: Iterable, settings: AnswerSettings) -> tuple[Draft, Draft]:
    """Two independent drafts from the same query and evidence, issued concurrently."""
    context = _context(query, evidence)
    requests = {i: _request(query, settings, i, context, f"answer_{i}") for i in (1, 2)}
    return _pair_with_retry(backend, requests, answer_schema(query))


def _mode_disagree(d1: Draft, d2: Draft, settings: AnswerSettings) -> bool:
    return disagree(d1, d2, settings.disagreement_mode, settings.f1_threshold)


def _draft_json(d: Draft) -> str:
    return json.dumps({"answer": d.answer_text, "option": d.chosen_option, "rationale": d.rationale},
                      ensure_ascii=False)


def reconsider(backend: Backend, query: Query, d1: Draft, d2: Draft, evidence: Iterable,
               settings: AnswerSettings, feedback: Optional[str] = None) -> ReconsiderResult:
    """Exchange-and-revise rounds until the drafts agree or the round budget runs out.

    If they still disagree, answerer 1 writes the consolidated answer.
    """
    evidence = list(evidence)
    schema = answer_schema(query)
    if feedback is None and not _mode_disagree(d1, d2, settings):
        return ReconsiderResult(ConsolidatedAnswer(d1.answer_text, d1.chosen_option, d1.rationale, 0), (d1, d2))
    context = _context(query, evidence)
    rounds: list[dict[str, Any]] = []
    for rnd in range(1, settings.max_reconsider_rounds + 1):
        requests = {}
        for mine, other in ((d1, d2), (d2, d1)):
            text = (f"{context}\nYour current draft: {_draft_json(mine)}\n"
                    f"The other answerer's draft: {_draft_json(other)}\n")
            if feedback:
                text += f"Reviewer feedback to address: {feedback}\n"
            text += "Cross-check both drafts against the evidence and all images, then give your revised answer."
            requests[mine.answerer_id] = _request(query, settings, mine.answerer_id, text, f"reconsider_{mine.answerer_id}")
        d1, d2 = _pair_with_retry(backend, requests, schema)
        agreed = not _mode_disagree(d1, d2, settings)
        rounds.append({"round": rnd, "drafts": [d1.to_dict(), d2.to_dict()], "agree": agreed})
        if agreed:
            return ReconsiderResult(ConsolidatedAnswer(d1.answer_text, d1.chosen_option, d1.rationale, rnd),
                                    (d1, d2), rounds)
    text = (f"{context}\nDraft A: {_draft_json(d1)}\nDraft B: {_draft_json(d2)}\n")
    if feedback:
        text += f"Reviewer feedback to address: {feedback}\n"
    text += "The drafts still disagree. Merge them into a single consolidated answer."
    raw = complete_structured(backend, _request(query, settings, 1, text, "consolidate"), schema)
    merged = _to_draft(1, raw)
    rounds.append({"round": settings.max_reconsider_rounds, "consolidation": True, "answer": merged.to_dict()})
    return ReconsiderResult(
        ConsolidatedAnswer(merged.answer_text, merged.chosen_option, merged.rationale, settings.max_reconsider_rounds),
        (d1, d2),
        rounds,
    )
