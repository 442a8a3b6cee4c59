"""The Manager: bounded state machine running retrieval, reflection, drafting and improvement."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional

from . import __version__
from .answerer import AnswerSettings, ConsolidatedAnswer, Draft, disagree, draft_pair, reconsider, token_f1
from .backend import Backend, CachingBackend, CallLog, ChatMessage, ChatRequest, HTTPBackend, ScriptedMock, complete_structured
from .config import EngineConfig
from .core import (
    Clock,
    LogicalClock,
    Query,
    SessionState,
    WallClock,
    check_sequence,
    deserialize_trace,
    new_session,
    record_event,
    serialize_trace,
    session_id_for,
)
from .errors import BackendError, ReplayError, ReplayUnsupported, SessionFailed, StructuredParseError
from .improver import evaluate, feedback_for_revision
from .reflector import CRITERIA, GateVerdict, JudgeScores, gate, reformulate, score_evidence
from .tools import ToolRegistry, ToolSpec, formulate_keywords

logger = logging.getLogger(__name__)

NONE_TOOL = "NONE"


@dataclass
class FinalAnswer:
    answer_text: str
    chosen_option: Optional[str]
    verified: bool
    loop_stats: dict[str, int]
    trace_path: Optional[str] = None
    session_id: str = ""

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def build_backend(config: EngineConfig, script: Optional[list[dict[str, Any]]] = None) -> Backend:
    inner: Backend
    if config.mode == "mock":
        if script is None:
            raise ValueError("mock mode needs a script")
        inner = ScriptedMock(script)
    else:
        inner = HTTPBackend(config.base_url, timeout=config.timeout_s)
    return CachingBackend(inner, enabled=config.cache)


def _mock_of(backend: Backend) -> Optional[ScriptedMock]:
    while not isinstance(backend, ScriptedMock):
        backend = getattr(backend, "inner", None)
        if backend is None:
            return None
    return backend


def decide_tool(backend: Backend, state: SessionState, registry: ToolRegistry, *,
                model_id: str = "default", temperature: float = 0.2) -> tuple[Optional[ToolSpec], Optional[str]]:
    """Pick one registered tool or none. Returns ``(tool, warning)``."""
    if not len(registry):
        return None, None
    names = sorted(registry.specs)
    listing = "\n".join(f"- {n}: {registry.specs[n].description}" for n in names)
    listing += f"\n- {NONE_TOOL}: answer from the question and images alone, no external evidence needed."
    query = state.query
    text = f"Question: {query.text}\n"
    for key in ("time", "location"):
        if query.metadata.get(key):
            text += f"{key.capitalize()}: {query.metadata[key]}\n"
    text += f"Available tools:\n{listing}\n" + 'Reply with JSON: {"tool": name, "reason": string}.'
    schema = {
        "type": "object",
        "properties": {"tool": {"type": "string", "enum": [*names, NONE_TOOL]}, "reason": {"type": "string"}},
        "required": ["tool"],
    }
    request = ChatRequest(
        model_id=model_id,
        messages=[
            ChatMessage.system("You are the Manager. Decide whether the question needs external evidence "
                               "and, if so, which single tool to use."),
            ChatMessage.user(text),
        ],
        temperature=temperature,
        seed=query.seed,
        max_tokens=128,
        step="decide_tool",
    )
    try:
        raw = complete_structured(backend, request, schema)
    except StructuredParseError as exc:
        return None, f"invalid tool choice after retry, proceeding without retrieval ({exc})"
    except BackendError as exc:
        return None, f"backend failure during tool decision, proceeding without retrieval ({exc})"
    if raw["tool"] == NONE_TOOL:
        return None, None
    return registry.get(raw["tool"]), None


class Session:
    """One question session. Owns its :class:`SessionState`; not shared across threads."""

    def __init__(self, query: Query | dict, config: EngineConfig, backend: Backend, *,
                 registry: Optional[ToolRegistry] = None, clock: Optional[Clock] = None) -> None:
        if not isinstance(query, Query):
            query = Query.model_validate(query)
        mock = _mock_of(backend)
        if mock is not None and config.mode != "mock":
            config = config.model_copy(update={"mode": "mock"})
        self.config = config
        self.query = query
        self.registry = registry if registry is not None else ToolRegistry.from_config(config.tools)
        self.calls = CallLog(backend)
        live = config.mode == "live"
        start = {
            "version": __version__,
            "mode": config.mode,
            "config": config.model_dump(mode="json"),
            "query": query.model_dump(mode="json"),
            "script": mock.script() if mock is not None else None,
            "tools": sorted(self.registry.specs),
        }
        self.state = new_session(
            query, config,
            clock=clock or (WallClock() if live else LogicalClock()),
            session_id=session_id_for(query, live=live),
            start_payload=start,
        )
        mcq = query.is_mcq if config.disagreement_mode == "auto" else config.disagreement_mode == "mcq"
        self.settings = AnswerSettings(
            model_ids=(config.model_for("answerer_1"), config.model_for("answerer_2")),
            temperature=config.temperature,
            max_tokens=config.max_tokens,
            identical_prompts=config.identical_prompts,
            max_reconsider_rounds=config.max_reconsider_rounds,
            disagreement_mode="mcq" if mcq else "free_text",
            f1_threshold=config.disagreement_threshold,
        )
        self.reconsider_rounds = 0

    def _event(self, role: str, event_type: str, payload: dict[str, Any], with_calls: bool = True) -> None:
        if with_calls:
            payload["calls"] = self.calls.drain()
        record_event(self.state, role, event_type, payload)

    # stage (b)
    def _retrieve(self, tool: ToolSpec) -> None:
        cfg, query, state = self.config, self.query, self.state
        params = {"location": query.metadata.get("location"), "date": query.metadata.get("time")}
        keywords = ""
        verdict: Optional[GateVerdict] = None
        for it in range(1, cfg.max_reflect_iters + 1):
            state.reflect_iters = it
            if verdict is None:
                keywords, fallback = formulate_keywords(
                    self.calls, query, state, model_id=cfg.model_for("retriever"), temperature=cfg.temperature)
                source = "fallback" if fallback else "model"
            else:
                previous = keywords
                keywords, warning = reformulate(
                    self.calls, previous, verdict, query,
                    model_id=cfg.model_for("retriever"), temperature=cfg.temperature)
                source = "reformulated"
                self._event("retriever", "query_reformulated", {
                    "iteration": it,
                    "previous": previous,
                    "keywords": keywords,
                    "rationale": verdict.rationale,
                    "warning": warning,
                })
            outcome = self.registry.execute(tool.name, keywords, params,
                                            first_id=state.evidence.next_id, clock=state.clock.now)
            state.evidence.extend(outcome.evidence)
            self._event("tool", "tool_executed", {
                "iteration": it,
                "tool": tool.name,
                "keywords": keywords,
                "keyword_source": source,
                "evidence": [e.to_dict() for e in outcome.evidence],
                "error": outcome.error,
                "note": outcome.note,
            })
            try:
                judged = score_evidence(self.calls, outcome.evidence, query,
                                        model_id=cfg.model_for("reflector"),
                                        include_images=cfg.reflector_sees_images)
            except StructuredParseError as exc:
                judged = JudgeScores({c: 0.0 for c in CRITERIA},
                                     rationale="judge output could not be parsed; evidence treated as inadequate",
                                     error=str(exc))
            self._event("reflector", "reflect_scored", {
                "iteration": it,
                "scores": judged.scores,
                "rationale": judged.rationale,
                "warnings": judged.warnings,
                "error": judged.error,
            })
            verdict = gate(judged.scores, cfg.reflector, judged.rationale)
            if judged.error:
                verdict = GateVerdict(False, verdict.scores, verdict.weighted_score, verdict.rationale)
            payload = {"iteration": it, **verdict.to_dict(), "threshold": cfg.reflector.threshold,
                       "weights": cfg.reflector.weights}
            if not verdict.accept and it == cfg.max_reflect_iters:
                payload["warning"] = "retrieval budget exhausted; proceeding with accumulated evidence"
            self._event("reflector", "reflect_verdict", payload, with_calls=False)
            if verdict.accept:
                return

    def _reconsider(self, d1: Draft, d2: Draft, feedback: Optional[str]) -> tuple[ConsolidatedAnswer, Draft, Draft]:
        result = reconsider(self.calls, self.query, d1, d2, self.state.evidence.items, self.settings, feedback)
        self.reconsider_rounds += result.answer.rounds_used
        self._event("answerer_1", "reconsidered", {
            "feedback": feedback,
            "rounds": result.rounds,
            "rounds_used": result.answer.rounds_used,
            "consolidated": result.answer.to_dict(),
        })
        return result.answer, *result.drafts

    def run(self) -> FinalAnswer:
        cfg, query, state = self.config, self.query, self.state
        tool, warning = decide_tool(self.calls, state, self.registry,
                                    model_id=cfg.model_for("manager"), temperature=cfg.temperature)
        self._event("manager", "tool_decided", {"tool": tool.name if tool else None, "warning": warning})
        if tool is not None:
            self._retrieve(tool)

        d1, d2 = draft_pair(self.calls, query, state.evidence.items, self.settings)
        calls = self.calls.drain()
        for d in (d1, d2):
            role = f"answerer_{d.answerer_id}"
            payload = {**d.to_dict(), "calls": [c for c in calls if c["step"] == f"answer_{d.answerer_id}"]}
            record_event(state, role, "draft_produced", payload)
        state.drafts.extend([d1, d2])

        mode = self.settings.disagreement_mode
        if disagree(d1, d2, mode, self.settings.f1_threshold):
            info: dict[str, Any] = {"mode": mode, "options": [d1.chosen_option, d2.chosen_option]}
            if mode == "free_text":
                info["f1"] = token_f1(d1.answer_text, d2.answer_text)
            self._event("manager", "disagreement", info, with_calls=False)
            answer, d1, d2 = self._reconsider(d1, d2, None)
        else:
            answer = ConsolidatedAnswer(d1.answer_text, d1.chosen_option, d1.rationale, 0)

        candidates = []
        passed = False
        for it in range(1, cfg.max_improve_iters + 1):
            state.improve_iters = it
            verdict = evaluate(self.calls, answer, query, state.evidence.items, cfg.improver,
                               model_id=cfg.model_for("improver"))
            self._event("improver", "improve_scored", {
                "iteration": it,
                "dim_scores": verdict.dim_scores,
                "per_image": verdict.per_image,
                "overall": verdict.overall,
                "feedback": verdict.feedback,
                "warnings": list(verdict.warnings),
            })
            self._event("improver", "improve_verdict", {
                "iteration": it,
                "pass": verdict.passed,
                "overall": verdict.overall,
                "threshold": cfg.improver.threshold,
                "answer": answer.to_dict(),
            }, with_calls=False)
            candidates.append((answer, verdict))
            if verdict.passed:
                passed = True
                break
            if it == cfg.max_improve_iters:
                break
            feedback = feedback_for_revision(verdict)
            self._event("improver", "feedback_issued", {"iteration": it, "feedback": feedback}, with_calls=False)
            answer, d1, d2 = self._reconsider(d1, d2, feedback)

        if passed:
            final_answer = candidates[-1][0]
        else:
            best = max(range(len(candidates)), key=lambda i: (candidates[i][1].overall, -i))
            final_answer = candidates[best][0]
        final_answer.verified = passed
        state.set_status("answered" if passed else "answered_unverified")
        final = FinalAnswer(
            answer_text=final_answer.answer_text,
            chosen_option=final_answer.chosen_option,
            verified=passed,
            loop_stats=self.loop_stats(),
            session_id=state.session_id,
        )
        record_event(state, "manager", "session_end", {
            "status": state.status,
            "final": {"answer": final.answer_text, "option": final.chosen_option, "verified": final.verified},
            "loop_stats": final.loop_stats,
        })
        return final

    def loop_stats(self) -> dict[str, int]:
        return {
            "reflect_iters": self.state.reflect_iters,
            "improve_iters": self.state.improve_iters,
            "reconsider_rounds": self.reconsider_rounds,
            "backend_calls": self.calls.count,
        }

    def fail(self, exc: BaseException) -> None:
        state = self.state
        if state.closed:
            return
        state.status = "failed"
        record_event(state, "manager", "session_end", {
            "status": "failed",
            "error": f"{type(exc).__name__}: {exc}",
            "loop_stats": self.loop_stats(),
            "calls": self.calls.drain(),
        })


def execute(session: Session, trace_path: Optional[str | Path] = None) -> FinalAnswer:
    """Run ``session``; the trace is written (and closed) whether or not it succeeds."""
    try:
        final = session.run()
    except Exception as exc:
        logger.error("session %s failed: %s", session.state.session_id, exc)
        session.fail(exc)
        _write_trace(session.state, trace_path)
        raise SessionFailed(str(exc), state=session.state, cause=exc) from exc
    if trace_path is not None:
        final.trace_path = str(trace_path)
    _write_trace(session.state, trace_path)
    return final


def _write_trace(state: SessionState, trace_path: Optional[str | Path]) -> None:
    if trace_path is None:
        return
    path = Path(trace_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(serialize_trace(state))


def run_session(query: Query | dict, config: EngineConfig, *, backend: Optional[Backend] = None,
                script: Optional[list[dict[str, Any]]] = None, registry: Optional[ToolRegistry] = None,
                clock: Optional[Clock] = None, trace_path: Optional[str | Path] = None) -> FinalAnswer:
    """Answer one query. Raises :class:`SessionFailed` on unrecoverable errors."""
    if backend is None:
        backend = build_backend(config, script)
    session = Session(query, config, backend, registry=registry, clock=clock)
    return execute(session, trace_path)


def _comparable(events) -> list[tuple]:
    return [(e.seq, e.session_id, e.role, e.event_type, e.payload) for e in events]


def replay(trace_path: str | Path, *, registry: Optional[ToolRegistry] = None) -> FinalAnswer:
    """Re-run a mock-mode trace and check the new trace matches it event for event (ignoring ts)."""
    original = deserialize_trace(Path(trace_path).read_bytes())
    check_sequence(original)
    start = original[0].payload or {}
    if start.get("mode") != "mock" or start.get("script") is None:
        raise ReplayUnsupported("only mock-mode traces with an embedded script can be replayed")
    config = EngineConfig.model_validate(start["config"])
    query = Query.model_validate(start["query"])
    backend = CachingBackend(ScriptedMock(start["script"]), enabled=config.cache)
    session = Session(query, config, backend, registry=registry)
    failure: Optional[SessionFailed] = None
    try:
        final = execute(session)
    except SessionFailed as exc:
        failure = exc
    rerun = deserialize_trace(serialize_trace(session.state))
    a, b = _comparable(original), _comparable(rerun)
    for i, (x, y) in enumerate(zip(a, b)):
        if x != y:
            raise ReplayError(f"replay diverged at seq {i}: recorded {x[3]}, replayed {y[3]}")
    if len(a) != len(b):
        raise ReplayError(f"replay produced {len(b)} events, trace has {len(a)}")
    if failure is not None:
        raise failure
    return final
