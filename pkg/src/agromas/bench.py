"""Benchmark harness: dataset loading, accuracy metric, category and image-count reports."""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Iterable, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .backend import Backend, CachingBackend, ScriptedMock
from .config import EngineConfig
from .core import MAX_IMAGES, ImageRef, Option, Query
from .errors import AggregationError, DatasetError, SessionFailed
from .orchestrator import build_backend, run_session
from .tools import ToolRegistry

logger = logging.getLogger(__name__)

CATEGORIES = ("DI", "PI", "SI", "MI", "SD")
BUCKETS = ("1", "2", "3", "4+")

Category = Literal["DI", "PI", "SI", "MI", "SD"]


class RecordMetadata(BaseModel):
    model_config = ConfigDict(extra="allow")

    time: Optional[str] = None
    location: Optional[str] = None


class DatasetRecord(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    id: str = Field(min_length=1)
    question: str = Field(min_length=1)
    options: list[Option] = Field(min_length=1)
    answer_letter: str = Field(alias="answer")
    category: Category
    images: list[ImageRef] = Field(min_length=1, max_length=MAX_IMAGES)
    metadata: RecordMetadata = Field(default_factory=RecordMetadata)

    @model_validator(mode="after")
    def _answer_in_options(self) -> "DatasetRecord":
        letters = [o.letter for o in self.options]
        if len(letters) != len(set(letters)):
            raise ValueError("duplicate option letters")
        if self.answer_letter not in letters:
            raise ValueError(f"answer {self.answer_letter!r} is not one of the options {letters}")
        return self

    def to_query(self, seed: int = 0) -> Query:
        meta = {k: v for k, v in (("time", self.metadata.time), ("location", self.metadata.location)) if v}
        return Query(text=self.question, images=self.images, options=self.options, metadata=meta, seed=seed)


def _is_local(uri: str) -> bool:
    return "://" not in uri and not uri.startswith("data:")


def load_dataset(path: str | Path, *, check_images: bool = True) -> list[DatasetRecord]:
    """Load and validate a JSONL dataset, collecting every bad line before raising.

    Relative local image paths are resolved against the dataset's directory.
    """
    path = Path(path)
    records: list[DatasetRecord] = []
    problems: list[tuple[int, str]] = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
            record = DatasetRecord.model_validate(raw)
        except json.JSONDecodeError as exc:
            problems.append((lineno, f"invalid JSON: {exc.msg}"))
            continue
        except ValidationError as exc:
            msgs = [f"{'.'.join(str(p) for p in err['loc']) or 'record'}: {err['msg']}" for err in exc.errors()]
            problems.append((lineno, "; ".join(msgs)))
            continue
        if record.id in seen:
            problems.append((lineno, f"duplicate id {record.id!r} (first on line {seen[record.id]})"))
            continue
        seen[record.id] = lineno
        images = []
        for img in record.images:
            if _is_local(img.uri):
                local = Path(img.uri) if Path(img.uri).is_absolute() else (path.parent / img.uri).resolve()
                if check_images and not local.exists():
                    problems.append((lineno, f"image {img.id!r} not found at {local}"))
                img = img.model_copy(update={"uri": str(local)})
            images.append(img)
        records.append(record.model_copy(update={"images": images}))
    if problems:
        raise DatasetError(problems)
    return records


def score(predicted: Optional[str], gold: str) -> int:
    if not predicted:
        return 0
    return int(predicted.strip().upper() == gold.strip().upper())


def bucket(n_images: int) -> Union[int, str]:
    if n_images < 1:
        raise ValueError(f"image count must be >= 1, got {n_images}")
    return n_images if n_images <= 3 else "4+"


class Cell(BaseModel):
    correct: int
    total: int
    accuracy: float


class Report(BaseModel):
    overall_accuracy: float
    per_category: dict[str, Cell]
    per_bucket: dict[str, Cell]
    macro_average: float
    n: int


def aggregate(results: Iterable[tuple[Any, Optional[str], int]]) -> Report:
    """Micro overall, per-category and per-bucket accuracies, and the unweighted category mean."""
    cats: dict[str, list[int]] = {}
    buckets: dict[str, list[int]] = {}
    seen: set[str] = set()
    correct = total = 0
    for record, _predicted, s in results:
        if record.id in seen:
            raise AggregationError(f"record {record.id!r} scored more than once")
        seen.add(record.id)
        c = cats.setdefault(record.category, [0, 0])
        b = buckets.setdefault(str(bucket(len(record.images))), [0, 0])
        for cell in (c, b):
            cell[0] += s
            cell[1] += 1
        correct += s
        total += 1
    if total == 0:
        raise AggregationError("no results to aggregate")

    def cells(counts: dict[str, list[int]], order: Iterable[str]) -> dict[str, Cell]:
        return {k: Cell(correct=counts[k][0], total=counts[k][1], accuracy=counts[k][0] / counts[k][1])
                for k in order if k in counts}

    per_category = cells(cats, CATEGORIES)
    return Report(
        overall_accuracy=correct / total,
        per_category=per_category,
        per_bucket=cells(buckets, BUCKETS),
        macro_average=sum(c.accuracy for c in per_category.values()) / len(per_category),
        n=total,
    )


def run_bench(
    records: list[DatasetRecord],
    config: EngineConfig,
    *,
    concurrency: int = 1,
    backend_factory: Optional[Callable[[], Backend]] = None,
    script: Optional[list[dict[str, Any]]] = None,
    registry: Optional[ToolRegistry] = None,
    trace_dir: Optional[str | Path] = None,
    results_path: Optional[str | Path] = None,
    seed: int = 0,
) -> tuple[Report, list[dict[str, Any]]]:
    """Answer every record and aggregate. Failed sessions score 0 with ``failed=True``.

    In mock mode every session gets its own fresh copy of ``script``.
    """
    if concurrency < 1:
        raise ValueError("concurrency must be >= 1")
    if backend_factory is None:
        if config.mode == "mock" or script is not None:
            if script is None:
                raise ValueError("mock mode needs a script")
            backend_factory = lambda: CachingBackend(ScriptedMock(script), enabled=config.cache)  # noqa: E731
        else:
            shared = build_backend(config)
            backend_factory = lambda: shared  # noqa: E731
    if registry is None:
        registry = ToolRegistry.from_config(config.tools)

    def one(record: DatasetRecord) -> dict[str, Any]:
        trace = Path(trace_dir) / f"{record.id}.jsonl" if trace_dir else None
        try:
            final = run_session(record.to_query(seed), config, backend=backend_factory(),
                                registry=registry, trace_path=trace)
        except SessionFailed as exc:
            logger.warning("record %s failed: %s", record.id, exc)
            stats = exc.state.history[-1].payload.get("loop_stats") if exc.state else None
            return {"id": record.id, "predicted": None, "gold": record.answer_letter, "score": 0,
                    "verified": False, "loop_stats": stats, "failed": True}
        return {
            "id": record.id,
            "predicted": final.chosen_option,
            "gold": record.answer_letter,
            "score": score(final.chosen_option, record.answer_letter),
            "verified": final.verified,
            "loop_stats": final.loop_stats,
            "failed": False,
        }

    if concurrency == 1:
        rows = [one(r) for r in records]
    else:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            rows = list(pool.map(one, records))
    report = aggregate((rec, row["predicted"], row["score"]) for rec, row in zip(records, rows))
    if results_path is not None:
        Path(results_path).write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return report, rows


def _pct(cell: Optional[Cell]) -> str:
    return f"{cell.accuracy * 100:.2f}" if cell is not None else "-"


def render(report: Report, fmt: Literal["markdown", "csv", "json"] = "markdown") -> str:
    if fmt == "json":
        return report.model_dump_json(indent=2)
    cat_row = [_pct(report.per_category.get(c)) for c in CATEGORIES] + [f"{report.macro_average * 100:.2f}"]
    bucket_row = [_pct(report.per_bucket.get(b)) for b in BUCKETS]
    if fmt == "markdown":
        lines = [
            "| Category | " + " | ".join(CATEGORIES) + " | Average |",
            "|---" * (len(CATEGORIES) + 2) + "|",
            "| Accuracy | " + " | ".join(cat_row) + " |",
            "",
            "| Num of Images | " + " | ".join(BUCKETS) + " |",
            "|---" * (len(BUCKETS) + 1) + "|",
            "| Accuracy | " + " | ".join(bucket_row) + " |",
        ]
        return "\n".join(lines) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([*CATEGORIES, "Average"])
        writer.writerow(cat_row)
        buf.write("\n")
        writer.writerow(list(BUCKETS))
        writer.writerow(bucket_row)
        return buf.getvalue()
    raise ValueError(f"unknown format {fmt!r}")
