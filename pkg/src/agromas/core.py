"""Domain types, session state and the append-only trace log."""

from __future__ import annotations

import hashlib
import itertools
import json
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Iterable, Literal, Optional, Protocol

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .errors import SequencingError, TraceParseError

MAX_IMAGES = 10
OPTION_LETTERS = "ABCDEFGHIJ"

Role = Literal["manager", "retriever", "reflector", "answerer_1", "answerer_2", "improver", "tool", "backend"]
EventType = Literal[
    "session_start",
    "tool_decided",
    "tool_executed",
    "reflect_scored",
    "reflect_verdict",
    "query_reformulated",
    "draft_produced",
    "disagreement",
    "reconsidered",
    "improve_scored",
    "improve_verdict",
    "feedback_issued",
    "session_end",
]
Status = Literal["running", "answered", "answered_unverified", "failed"]

TRACE_KEYS = ("seq", "session_id", "role", "event_type", "payload", "ts")


class Clock(Protocol):
    def now(self) -> float | int: ...


class LogicalClock:
    """Monotonic counter; every read advances by one."""

    def __init__(self, start: int = 0) -> None:
        self._counter = itertools.count(start)
        self._lock = threading.Lock()

    def now(self) -> int:
        with self._lock:
            return next(self._counter)


class WallClock:
    def now(self) -> float:
        return round(time.time(), 6)


class ImageRef(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str = Field(min_length=1)
    uri: str = Field(min_length=1)
    caption: Optional[str] = None


class Option(BaseModel):
    model_config = ConfigDict(frozen=True)

    letter: str
    text: str

    @field_validator("letter")
    @classmethod
    def _letter(cls, v: str) -> str:
        if len(v) != 1 or v not in OPTION_LETTERS:
            raise ValueError(f"option letter must be one of A-J, got {v!r}")
        return v


class Query(BaseModel):
    model_config = ConfigDict(frozen=True)

    text: str = Field(min_length=1)
    images: list[ImageRef] = Field(default_factory=list, max_length=MAX_IMAGES)
    options: Optional[list[Option]] = None
    metadata: dict[str, str] = Field(default_factory=dict)
    seed: int = Field(default=0, ge=0)

    @field_validator("text")
    @classmethod
    def _text(cls, v: str) -> str:
        if not v.strip():
            raise ValueError("text must not be blank")
        return v

    @field_validator("options")
    @classmethod
    def _options(cls, v: Optional[list[Option]]) -> Optional[list[Option]]:
        if v is None:
            return v
        letters = [o.letter for o in v]
        dupes = sorted({x for x in letters if letters.count(x) > 1})
        if dupes:
            raise ValueError(f"duplicate option letters: {', '.join(dupes)}")
        return v

    @model_validator(mode="after")
    def _image_ids(self) -> "Query":
        ids = [img.id for img in self.images]
        if len(ids) != len(set(ids)):
            raise ValueError("image ids must be unique within a query")
        return self

    @property
    def letters(self) -> list[str]:
        return [o.letter for o in self.options or []]

    @property
    def is_mcq(self) -> bool:
        return bool(self.options)


@dataclass(frozen=True)
class Evidence:
    id: int
    source_tool: str
    query_used: str
    content: str
    retrieved_at: float | int
    metadata: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "source_tool": self.source_tool,
            "query_used": self.query_used,
            "content": self.content,
            "retrieved_at": self.retrieved_at,
            "metadata": dict(self.metadata),
        }


class EvidenceSet:
    """Append-only evidence accumulated over one session."""

    def __init__(self, items: Iterable[Evidence] = ()) -> None:
        self._items: list[Evidence] = []
        self.extend(items)

    @property
    def items(self) -> tuple[Evidence, ...]:
        return tuple(self._items)

    @property
    def next_id(self) -> int:
        return self._items[-1].id + 1 if self._items else 0

    def append(self, item: Evidence) -> None:
        if self._items and item.id <= self._items[-1].id:
            raise ValueError(f"evidence id {item.id} not greater than {self._items[-1].id}")
        self._items.append(item)

    def extend(self, items: Iterable[Evidence]) -> None:
        for item in items:
            self.append(item)

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(tuple(self._items))

    def __bool__(self) -> bool:
        return bool(self._items)


class TraceEvent(BaseModel):
    model_config = ConfigDict(frozen=True)

    seq: int = Field(ge=0)
    session_id: str
    role: Role
    event_type: EventType
    payload: Any = None
    ts: float | int

    def to_json(self) -> str:
        record = {k: getattr(self, k) for k in TRACE_KEYS}
        return json.dumps(record, ensure_ascii=False, separators=(",", ":"))


@dataclass
class SessionState:
    session_id: str
    query: Query
    config: Any
    clock: Clock
    evidence: EvidenceSet = field(default_factory=EvidenceSet)
    history: list[TraceEvent] = field(default_factory=list)
    drafts: list[Any] = field(default_factory=list)
    reflect_iters: int = 0
    improve_iters: int = 0
    status: Status = "running"

    @property
    def closed(self) -> bool:
        return bool(self.history) and self.history[-1].event_type == "session_end"

    def set_status(self, status: Status) -> None:
        if self.status != "running" and status != self.status:
            raise SequencingError(f"illegal status transition {self.status} -> {status}")
        self.status = status

    def events(self, event_type: str) -> list[TraceEvent]:
        return [e for e in self.history if e.event_type == event_type]


def session_id_for(query: Query, live: bool = False) -> str:
    if live:
        import uuid

        return f"s-{uuid.uuid4().hex[:12]}"
    digest = hashlib.sha256(query.model_dump_json().encode()).hexdigest()
    return f"s-{digest[:12]}"


def new_session(
    query: Query,
    config: Any,
    *,
    clock: Optional[Clock] = None,
    session_id: Optional[str] = None,
    start_payload: Any = None,
) -> SessionState:
    """Open a session and record its ``session_start`` event.

    ``query`` may be a mapping; it is validated into a :class:`Query`.
    """
    if not isinstance(query, Query):
        query = Query.model_validate(query)
    state = SessionState(
        session_id=session_id or session_id_for(query),
        query=query,
        config=config,
        clock=clock or LogicalClock(),
    )
    record_event(state, "manager", "session_start", start_payload if start_payload is not None else {})
    return state


def record_event(state: SessionState, role: str, event_type: str, payload: Any = None) -> SessionState:
    if state.closed:
        raise SequencingError(f"cannot record {event_type!r}: session {state.session_id} already ended")
    if state.status != "running" and event_type != "session_end":
        raise SequencingError(f"cannot record {event_type!r} with status {state.status}")
    if not state.history and event_type != "session_start":
        raise SequencingError("first event must be session_start")
    if state.history and event_type == "session_start":
        raise SequencingError("session_start may only be recorded once")
    seq = state.history[-1].seq + 1 if state.history else 0
    event = TraceEvent(
        seq=seq,
        session_id=state.session_id,
        role=role,
        event_type=event_type,
        payload=payload,
        ts=state.clock.now(),
    )
    state.history.append(event)
    return state


def serialize_trace(state_or_events: SessionState | Iterable[TraceEvent]) -> bytes:
    events = state_or_events.history if isinstance(state_or_events, SessionState) else state_or_events
    return b"".join((e.to_json() + "\n").encode("utf-8") for e in events)


def deserialize_trace(data: bytes | str) -> list[TraceEvent]:
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    events = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceParseError(lineno, f"invalid JSON: {exc.msg}") from exc
        if not isinstance(raw, dict):
            raise TraceParseError(lineno, "expected a JSON object")
        missing = [k for k in TRACE_KEYS if k not in raw]
        if missing:
            raise TraceParseError(lineno, f"missing keys {missing}")
        try:
            events.append(TraceEvent.model_validate(raw))
        except ValueError as exc:
            raise TraceParseError(lineno, str(exc)) from exc
    return events


def check_sequence(events: list[TraceEvent]) -> None:
    """Raise :class:`SequencingError` unless seqs are 0..n-1 and start/end bracket the log."""
    for i, event in enumerate(events):
        if event.seq != i:
            raise SequencingError(f"expected seq {i}, found {event.seq}")
    if not events or events[0].event_type != "session_start":
        raise SequencingError("trace must begin with session_start")
    starts = sum(e.event_type == "session_start" for e in events)
    ends = [i for i, e in enumerate(events) if e.event_type == "session_end"]
    if starts != 1:
        raise SequencingError("trace must contain exactly one session_start")
    if len(ends) > 1 or (ends and ends[0] != len(events) - 1):
        raise SequencingError("session_end must be the last event and appear at most once")
