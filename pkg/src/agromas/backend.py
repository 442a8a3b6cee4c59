"""Model-call layer: OpenAI-compatible HTTP client, scripted mock, structured parsing, cache."""

from __future__ import annotations

import base64
import copy
import hashlib
import json
import logging
import mimetypes
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal, Optional, Protocol, Union

import httpx
import jsonschema
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .core import ImageRef
from .errors import (
    BackendTimeout,
    ProviderError,
    ScriptExhaustedError,
    StructuredParseError,
)

logger = logging.getLogger(__name__)

Part = Union[str, ImageRef]


class ChatMessage(BaseModel):
    model_config = ConfigDict(frozen=True)

    role: Literal["system", "user", "assistant"]
    parts: list[Part] = Field(min_length=1)

    @model_validator(mode="after")
    def _images_only_from_user(self) -> "ChatMessage":
        if self.role != "user" and any(isinstance(p, ImageRef) for p in self.parts):
            raise ValueError(f"image parts are only allowed in user messages, not {self.role}")
        return self

    @classmethod
    def system(cls, text: str) -> "ChatMessage":
        return cls(role="system", parts=[text])

    @classmethod
    def user(cls, text: str, images: list[ImageRef] | tuple = ()) -> "ChatMessage":
        return cls(role="user", parts=[text, *images])

    @property
    def text(self) -> str:
        return "\n".join(p for p in self.parts if isinstance(p, str))


class ChatRequest(BaseModel):
    model_config = ConfigDict(frozen=True)

    model_id: str
    messages: list[ChatMessage] = Field(min_length=1)
    temperature: float = Field(default=0.2, ge=0, le=2)
    seed: Optional[int] = Field(default=None, ge=0)
    max_tokens: int = Field(default=1024, gt=0)
    response_schema: Optional[dict[str, Any]] = None
    # Pipeline step that issued the call, e.g. "decide_tool"; used for mock matching.
    step: str = ""


@dataclass(frozen=True)
class ChatResponse:
    text: str
    finish_reason: Literal["stop", "length", "error"] = "stop"
    usage: dict[str, int] = field(default_factory=lambda: {"prompt_tokens": 0, "completion_tokens": 0})


class Backend(Protocol):
    def complete(self, request: ChatRequest) -> ChatResponse: ...


def render_prompt(request: ChatRequest) -> str:
    """Flatten a request into the text that mock regexes and traces see."""
    lines = [f"### step={request.step}"]
    for msg in request.messages:
        lines.append(f"[{msg.role}]")
        for part in msg.parts:
            lines.append(f"<image id={part.id}>" if isinstance(part, ImageRef) else part)
    return "\n".join(lines)


# --- HTTP provider ----------------------------------------------------------


def _image_url(image: ImageRef) -> str:
    if re.match(r"^(https?|data):", image.uri):
        return image.uri
    path = Path(image.uri)
    mime = mimetypes.guess_type(path.name)[0] or "image/jpeg"
    return f"data:{mime};base64,{base64.b64encode(path.read_bytes()).decode()}"


def to_wire(request: ChatRequest) -> dict[str, Any]:
    messages = []
    for msg in request.messages:
        content = []
        for part in msg.parts:
            if isinstance(part, ImageRef):
                content.append({"type": "image_url", "image_url": {"url": _image_url(part)}})
            else:
                content.append({"type": "text", "text": part})
        messages.append({"role": msg.role, "content": content})
    body: dict[str, Any] = {
        "model": request.model_id,
        "messages": messages,
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
    }
    if request.seed is not None:
        body["seed"] = request.seed
    if request.response_schema is not None:
        body["response_format"] = {
            "type": "json_schema",
            "json_schema": {"name": request.step or "response", "schema": request.response_schema},
        }
    return body


class HTTPBackend:
    """Client for ``POST {base_url}/v1/chat/completions``.

    Transport errors, timeouts and 5xx responses are retried ``retries`` times
    with exponential backoff; other non-2xx statuses fail immediately.
    """

    def __init__(
        self,
        base_url: Optional[str] = None,
        api_key: Optional[str] = None,
        *,
        timeout: float = 60.0,
        retries: int = 2,
        backoff: float = 0.5,
        transport: Optional[httpx.BaseTransport] = None,
    ) -> None:
        base_url = base_url or os.environ.get("AGRO_BASE_URL")
        if not base_url:
            raise ProviderError("no base URL configured (set AGRO_BASE_URL or config.base_url)")
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get("AGRO_API_KEY")
        self.retries = retries
        self.backoff = backoff
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    @property
    def url(self) -> str:
        return f"{self.base_url}/v1/chat/completions"

    def complete(self, request: ChatRequest) -> ChatResponse:
        body = to_wire(request)
        attempt = 0
        while True:
            try:
                resp = self._client.post(self.url, json=body)
                if resp.status_code >= 500 and attempt < self.retries:
                    raise _Retryable(f"HTTP {resp.status_code}")
                break
            except (httpx.TransportError, _Retryable) as exc:
                if attempt >= self.retries:
                    if isinstance(exc, httpx.TimeoutException):
                        raise BackendTimeout(f"request to {self.url} timed out") from exc
                    raise ProviderError(f"request to {self.url} failed: {exc}") from exc
                delay = self.backoff * (2**attempt)
                logger.warning("backend call failed (%s); retrying in %.1fs", exc, delay)
                time.sleep(delay)
                attempt += 1
        if not 200 <= resp.status_code < 300:
            excerpt = resp.text[:500]
            raise ProviderError(f"provider returned HTTP {resp.status_code}: {excerpt}", resp.status_code, excerpt)
        try:
            data = resp.json()
            choice = data["choices"][0]
            content = choice["message"].get("content") or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"malformed provider response: {resp.text[:200]}", resp.status_code) from exc
        if isinstance(content, list):
            content = "".join(p.get("text", "") for p in content if isinstance(p, dict))
        finish = choice.get("finish_reason") or "stop"
        if finish not in ("stop", "length"):
            finish = "stop" if finish in ("tool_calls", "eos") else "error"
        usage = data.get("usage") or {}
        return ChatResponse(
            text=content,
            finish_reason=finish,
            usage={
                "prompt_tokens": int(usage.get("prompt_tokens", 0)),
                "completion_tokens": int(usage.get("completion_tokens", 0)),
            },
        )

    def close(self) -> None:
        self._client.close()


class _Retryable(Exception):
    pass


# --- Scripted mock -----------------------------------------------------------


@dataclass
class ScriptEntry:
    match: str
    response: str
    # Extension: a reusable entry is never consumed.
    reusable: bool = False

    def matches(self, step: str, prompt: str) -> bool:
        if self.match == step:
            return True
        try:
            return re.search(self.match, prompt) is not None
        except re.error:
            return False

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"match": self.match, "response": self.response}
        if self.reusable:
            out["reusable"] = True
        return out


class ScriptedMock:
    """Deterministic backend replaying a script of ``{match, response}`` entries.

    An entry matches when ``match`` equals the request's step key, or when it is
    a regular expression found in :func:`render_prompt` of the request. The
    first unconsumed matching entry wins.
    """

    def __init__(self, entries: list[ScriptEntry | dict[str, Any]]) -> None:
        self.entries = [e if isinstance(e, ScriptEntry) else ScriptEntry(**e) for e in entries]
        self._consumed = [False] * len(self.entries)
        self._lock = threading.Lock()
        self.calls = 0

    @classmethod
    def load(cls, path: str | Path) -> "ScriptedMock":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(data, list):
            raise ValueError(f"{path}: mock script must be a JSON array of {{match, response}}")
        return cls(data)

    def fresh(self) -> "ScriptedMock":
        return ScriptedMock(copy.deepcopy(self.entries))

    def script(self) -> list[dict[str, Any]]:
        return [e.to_dict() for e in self.entries]

    @property
    def remaining(self) -> int:
        return sum(not c for c, e in zip(self._consumed, self.entries) if not e.reusable)

    def complete(self, request: ChatRequest) -> ChatResponse:
        prompt = render_prompt(request)
        with self._lock:
            self.calls += 1
            for i, entry in enumerate(self.entries):
                if self._consumed[i] or not entry.matches(request.step, prompt):
                    continue
                if not entry.reusable:
                    self._consumed[i] = True
                return ChatResponse(text=entry.response, finish_reason="stop", usage={
                    "prompt_tokens": len(prompt.split()),
                    "completion_tokens": len(entry.response.split()),
                })
        raise ScriptExhaustedError(request.step or prompt[:80])


# --- Cache -------------------------------------------------------------------


def cache_key(request: ChatRequest) -> str:
    canonical = json.dumps(request.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


class CachingBackend:
    """Memoizes ``complete`` on :func:`cache_key`. Failures pass through uncached."""

    def __init__(self, inner: Backend, enabled: bool = True) -> None:
        self.inner = inner
        self.enabled = enabled
        self._store: dict[str, ChatResponse] = {}
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> ChatResponse:
        if not self.enabled:
            return self.inner.complete(request)
        try:
            key = cache_key(request)
        except Exception:  # noqa: BLE001 - degrade to pass-through
            return self.inner.complete(request)
        with self._lock:
            hit = self._store.get(key)
        if hit is not None:
            return hit
        resp = self.inner.complete(request)
        if resp.finish_reason == "stop":
            with self._lock:
                self._store[key] = resp
        return resp


class CallLog:
    """Per-session wrapper counting calls and keeping prompt/response pairs for the trace."""

    def __init__(self, inner: Backend) -> None:
        self.inner = inner
        self.count = 0
        self._pending: list[dict[str, Any]] = []
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            self.count += 1
        record: dict[str, Any] = {"step": request.step, "model": request.model_id, "prompt": render_prompt(request)}
        try:
            resp = self.inner.complete(request)
        except Exception as exc:
            record["error"] = f"{type(exc).__name__}: {exc}"
            with self._lock:
                self._pending.append(record)
            raise
        record["response"] = resp.text
        record["finish_reason"] = resp.finish_reason
        with self._lock:
            self._pending.append(record)
        return resp

    def drain(self) -> list[dict[str, Any]]:
        """Return and clear pending records, grouped by step (stable within a step)."""
        with self._lock:
            pending, self._pending = self._pending, []
        return sorted(pending, key=lambda r: r["step"])


# --- Structured output -------------------------------------------------------

_FENCE = re.compile(r"^```[A-Za-z0-9_-]*\s*\n?(.*?)\n?\s*```$", re.DOTALL)


def strip_fences(text: str) -> str:
    text = text.strip()
    m = _FENCE.match(text)
    return m.group(1).strip() if m else text


def parse_structured(text: str, schema: dict[str, Any]) -> Any:
    """Parse ``text`` as JSON and validate it; raises ``ValueError`` with a readable reason."""
    body = strip_fences(text)
    try:
        value = json.loads(body)
    except json.JSONDecodeError as exc:
        raise ValueError(f"response is not valid JSON ({exc.msg})") from None
    try:
        jsonschema.validate(value, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ValueError(f"schema violation at {where}: {exc.message}") from None
    return value


def complete_structured(backend: Backend, request: ChatRequest, schema: dict[str, Any]) -> Any:
    """Call ``backend`` and return a JSON value that validates against ``schema``.

    Code fences are stripped. On failure the request is retried once with the
    validation error appended; a second failure raises
    :class:`StructuredParseError` carrying both raw texts.
    """
    if schema.get("type") != "object" or not schema.get("required"):
        raise ValueError("schema must be an object schema with required fields")
    request = request.model_copy(update={"response_schema": schema})
    raws: list[str] = []
    reasons: list[str] = []
    for attempt in range(2):
        resp = backend.complete(request)
        raws.append(resp.text)
        try:
            if resp.finish_reason == "length":
                raise ValueError("response truncated (finish_reason=length)")
            return parse_structured(resp.text, schema)
        except ValueError as exc:
            reasons.append(str(exc))
        if attempt == 0:
            repair = ChatMessage.user(
                f"Your previous reply was rejected: {reasons[-1]}. "
                "Reply again with only a JSON object that satisfies the required schema:\n"
                + json.dumps(schema, sort_keys=True)
            )
            prior = [ChatMessage(role="assistant", parts=[resp.text or "(empty)"])]
            request = request.model_copy(update={"messages": [*request.messages, *prior, repair]})
    raise StructuredParseError(
        f"structured output for step {request.step!r} invalid after retry: {reasons[-1]}", raws
    )
