"""Retriever tools: keyword formulation, lexical corpus search, weather lookup, web search."""

from __future__ import annotations

import csv
import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from datetime import date as _date
from pathlib import Path
from typing import Any, Callable, Literal, Optional

import httpx

from .backend import Backend, ChatMessage, ChatRequest
from .core import Evidence, Query, SessionState
from .errors import FixtureError, RegistryError, ToolError

logger = logging.getLogger(__name__)

_TOKEN = re.compile(r"[^\W_]+")


def tokenize(text: str) -> list[str]:
    """Lowercased maximal alphanumeric runs."""
    return _TOKEN.findall(text.lower())


@dataclass(frozen=True)
class ToolSpec:
    name: str
    description: str
    kind: Literal["corpus", "weather", "web"]
    params_schema: dict[str, Any] = field(default_factory=lambda: {"type": "object"})

    def __post_init__(self) -> None:
        if not self.name or not self.description.strip():
            raise ValueError("tool name and description must be non-empty")


@dataclass(frozen=True)
class CorpusDoc:
    id: str
    title: str
    body: str
    date: str = ""

    def __post_init__(self) -> None:
        if not self.body.strip():
            raise ValueError(f"document {self.id!r} has an empty body")


class LexicalIndex:
    """In-memory inverted index. Immutable after construction."""

    def __init__(self, docs: list[CorpusDoc]) -> None:
        ids = [d.id for d in docs]
        if len(ids) != len(set(ids)):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise FixtureError(f"duplicate document ids: {dupes}")
        self.docs = {d.id: d for d in docs}
        postings: dict[str, list[tuple[str, int]]] = {}
        for doc in docs:
            for term, tf in Counter(tokenize(f"{doc.title} {doc.body}" if doc.title else doc.body)).items():
                postings.setdefault(term, []).append((doc.id, tf))
        self.postings = {t: tuple(p) for t, p in postings.items()}

    @property
    def doc_count(self) -> int:
        return len(self.docs)

    def doc_freq(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def idf(self, term: str) -> float:
        n, df = self.doc_count, self.doc_freq(term)
        return math.log(1 + (n - df + 0.5) / (df + 0.5))


def load_corpus(path: str | Path) -> list[CorpusDoc]:
    """Load documents from a JSONL file or a directory of ``*.json`` files."""
    path = Path(path)
    docs: list[CorpusDoc] = []
    if path.is_dir():
        sources = [(p.name, 1, p.read_text(encoding="utf-8")) for p in sorted(path.glob("*.json"))]
    else:
        sources = [
            (path.name, n, line)
            for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1)
            if line.strip()
        ]
    for name, lineno, text in sources:
        try:
            raw = json.loads(text)
            docs.append(CorpusDoc(
                id=str(raw["id"]),
                title=str(raw.get("title", "")),
                body=str(raw["body"]),
                date=str(raw.get("date", "")),
            ))
        except (ValueError, KeyError, TypeError) as exc:
            raise FixtureError(f"{name}:{lineno}: bad corpus record ({exc})") from exc
    return docs


def corpus_search(index: LexicalIndex, keywords: str, k: int) -> list[tuple[CorpusDoc, float]]:
    """Rank documents by summed ``tf * ln(1 + (N - df + .5) / (df + .5))`` over distinct query terms.

    Only documents sharing at least one term are returned. Ties go to the
    smaller doc id.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    if k == 0:
        return []
    contributions: dict[str, list[float]] = {}
    for term in sorted(set(tokenize(keywords))):
        idf = index.idf(term)
        for doc_id, tf in index.postings.get(term, ()):
            contributions.setdefault(doc_id, []).append(tf * idf)
    scored = [(doc_id, math.fsum(parts)) for doc_id, parts in contributions.items()]
    scored.sort(key=lambda x: (-x[1], x[0]))
    return [(index.docs[doc_id], score) for doc_id, score in scored[:k]]


# --- Weather -------------------------------------------------------------------


@dataclass(frozen=True)
class WeatherRow:
    location: str
    date: str
    summary: str


def load_weather(path: str | Path) -> list[WeatherRow]:
    rows: list[WeatherRow] = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["location", "date", "summary"]:
            raise FixtureError(f"{path}: header must be location,date,summary")
        for rowno, raw in enumerate(reader, 2):
            location, day, summary = (raw.get(k) for k in ("location", "date", "summary"))
            if None in raw or not location or not day or not summary:
                raise FixtureError(f"{path}: malformed row {rowno}")
            try:
                _date.fromisoformat(day.strip())
            except ValueError:
                raise FixtureError(f"{path}: row {rowno} has invalid date {day!r}") from None
            rows.append(WeatherRow(location.strip(), day.strip(), summary.strip()))
    return rows


def weather_lookup(rows: list[WeatherRow], location: Optional[str], date: Optional[str]) -> list[WeatherRow]:
    if not location:
        return []
    loc = location.strip().lower()
    day = (date or "").strip()[:10]
    return [r for r in rows if r.location.lower() == loc and (not day or r.date == day)]


# --- Web search -----------------------------------------------------------------


def web_search(base_url: str, keywords: str, k: int, *, timeout: float = 10.0,
               client: Optional[httpx.Client] = None) -> list[dict[str, str]]:
    """``GET {base}/search?q=..&k=..`` returning a JSON list of ``{title, snippet, url}``."""
    if k <= 0:
        return []
    try:
        if client is None:
            resp = httpx.get(f"{base_url.rstrip('/')}/search", params={"q": keywords, "k": k}, timeout=timeout)
        else:
            resp = client.get(f"{base_url.rstrip('/')}/search", params={"q": keywords, "k": k})
        resp.raise_for_status()
        results = resp.json()
    except (httpx.HTTPError, ValueError) as exc:
        raise ToolError(f"web search failed: {exc}") from exc
    if not isinstance(results, list):
        raise ToolError("web search returned a non-list body")
    return [r for r in results if isinstance(r, dict)][:k]


# --- Registry -------------------------------------------------------------------

CORPUS = ToolSpec(
    "corpus_search",
    "Search the local agricultural literature collection (pests, diseases, management guides).",
    "corpus",
    {"type": "object", "properties": {"k": {"type": "integer", "minimum": 0}}},
)
WEATHER = ToolSpec(
    "weather_lookup",
    "Look up recorded local weather for the question's location and date.",
    "weather",
    {"type": "object", "properties": {"location": {"type": "string"}, "date": {"type": "string"}}},
)
WEB = ToolSpec(
    "web_search",
    "Search the web for recent reports, advisories and policy updates.",
    "web",
    {"type": "object", "properties": {"k": {"type": "integer", "minimum": 0}}},
)


@dataclass
class ToolOutcome:
    evidence: list[Evidence]
    error: Optional[str] = None
    note: Optional[str] = None


class ToolRegistry:
    """Registered tools and their read-only backing data."""

    def __init__(
        self,
        *,
        index: Optional[LexicalIndex] = None,
        weather_rows: Optional[list[WeatherRow]] = None,
        web_base_url: Optional[str] = None,
        corpus_k: int = 5,
        web_k: int = 5,
    ) -> None:
        self.index = index
        self.weather_rows = weather_rows
        self.web_base_url = web_base_url
        self.corpus_k = corpus_k
        self.web_k = web_k
        self.specs: dict[str, ToolSpec] = {}
        if index is not None:
            self.specs[CORPUS.name] = CORPUS
        if weather_rows is not None:
            self.specs[WEATHER.name] = WEATHER
        if web_base_url:
            self.specs[WEB.name] = WEB

    @classmethod
    def from_config(cls, tools_cfg: Any) -> "ToolRegistry":
        index = LexicalIndex(load_corpus(tools_cfg.corpus_path)) if tools_cfg.corpus_path else None
        rows = load_weather(tools_cfg.weather_path) if tools_cfg.weather_path else None
        return cls(
            index=index,
            weather_rows=rows,
            web_base_url=tools_cfg.web_search_url,
            corpus_k=tools_cfg.corpus_k,
            web_k=tools_cfg.web_k,
        )

    def __len__(self) -> int:
        return len(self.specs)

    def __contains__(self, name: str) -> bool:
        return name in self.specs

    def get(self, name: str) -> ToolSpec:
        try:
            return self.specs[name]
        except KeyError:
            raise RegistryError(f"unknown tool {name!r}; registered: {sorted(self.specs)}") from None

    def execute(
        self,
        name: str,
        keywords: str,
        params: Optional[dict[str, Any]] = None,
        *,
        first_id: int = 0,
        clock: Optional[Callable[[], Any]] = None,
    ) -> ToolOutcome:
        """Run a tool and wrap its hits as :class:`Evidence` numbered from ``first_id``.

        Transport failures are reported in ``ToolOutcome.error`` with no evidence.
        """
        spec = self.get(name)
        params = params or {}
        now = clock or (lambda: 0)
        hits: list[tuple[str, dict[str, Any]]] = []
        note = None
        try:
            if spec.kind == "corpus":
                assert self.index is not None
                for doc, score in corpus_search(self.index, keywords, int(params.get("k", self.corpus_k))):
                    text = f"{doc.title}: {doc.body}" if doc.title else doc.body
                    hits.append((text, {"doc_id": doc.id, "score": round(score, 12), "date": doc.date}))
            elif spec.kind == "weather":
                assert self.weather_rows is not None
                location, day = params.get("location"), params.get("date")
                for row in weather_lookup(self.weather_rows, location, day):
                    hits.append((row.summary, {"location": row.location, "date": row.date}))
                if not hits:
                    note = f"no weather record for location={location!r} date={day!r}"
            else:
                assert self.web_base_url
                for r in web_search(self.web_base_url, keywords, int(params.get("k", self.web_k))):
                    snippet = str(r.get("snippet", ""))
                    title = str(r.get("title", ""))
                    hits.append((f"{title}: {snippet}" if title else snippet,
                                 {"url": r.get("url"), "title": title}))
        except ToolError as exc:
            logger.warning("tool %s failed: %s", name, exc)
            return ToolOutcome([], error=str(exc))
        evidence = [
            Evidence(
                id=first_id + i,
                source_tool=name,
                query_used=keywords,
                content=content,
                retrieved_at=now(),
                metadata=meta,
            )
            for i, (content, meta) in enumerate(hits)
        ]
        return ToolOutcome(evidence, note=note)


def execute_tool(registry: ToolRegistry, tool: ToolSpec | str, keywords: str,
                 params: Optional[dict[str, Any]] = None, **kwargs: Any) -> ToolOutcome:
    name = tool.name if isinstance(tool, ToolSpec) else tool
    return registry.execute(name, keywords, params, **kwargs)


# --- Keyword formulation --------------------------------------------------------

RETRIEVER_SYSTEM = (
    "You are the Retriever in an agricultural question-answering team. "
    "Write a short search query (keywords only, one line) that will find evidence for the question."
)


def _describe_query(query: Query) -> str:
    lines = [f"Question: {query.text}"]
    if query.options:
        lines.append("Options: " + "; ".join(f"{o.letter}. {o.text}" for o in query.options))
    captions = [f"{img.id}: {img.caption}" for img in query.images if img.caption]
    if captions:
        lines.append("Image captions: " + "; ".join(captions))
    for key in ("time", "location"):
        if query.metadata.get(key):
            lines.append(f"{key.capitalize()}: {query.metadata[key]}")
    return "\n".join(lines)


def prior_feedback(state: SessionState) -> list[str]:
    """Rationales from every rejected reflector verdict so far."""
    return [
        e.payload.get("rationale", "")
        for e in state.events("reflect_verdict")
        if isinstance(e.payload, dict) and not e.payload.get("accept")
    ]


def formulate_keywords(backend: Backend, query: Query, state: SessionState, *,
                       model_id: str = "default", temperature: float = 0.2,
                       max_tokens: int = 64) -> tuple[str, bool]:
    """Ask the model for a search string. Returns ``(keywords, used_fallback)``."""
    text = _describe_query(query)
    feedback = [f for f in prior_feedback(state) if f]
    if feedback:
        text += "\nEarlier evidence was rejected by the reviewer:\n" + "\n".join(f"- {f}" for f in feedback)
    request = ChatRequest(
        model_id=model_id,
        messages=[ChatMessage.system(RETRIEVER_SYSTEM), ChatMessage.user(text + "\nSearch keywords:")],
        temperature=temperature,
        seed=query.seed,
        max_tokens=max_tokens,
        step="formulate_keywords",
    )
    keywords = " ".join(backend.complete(request).text.split())
    if not keywords:
        return query.text, True
    return keywords, False
