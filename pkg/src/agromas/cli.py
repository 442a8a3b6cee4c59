"""Command-line entry points: ask, bench, replay, validate-config."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from enum import IntEnum
from pathlib import Path
from typing import Any, Optional, Sequence

from pydantic import ValidationError

from .backend import ScriptedMock
from .bench import load_dataset, render, run_bench
from .config import EngineConfig, flatten, load_config
from .core import ImageRef, Option, Query
from .errors import AgroError, DatasetError, FixtureError, ProviderError, ReplayError, SequencingError, SessionFailed, TraceParseError
from .orchestrator import FinalAnswer, replay, run_session

logger = logging.getLogger("agromas")


class ExitCode(IntEnum):
    OK = 0
    USAGE = 1
    SESSION_FAILED = 2
    PROVIDER = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(ExitCode.USAGE)


class UsageError(Exception):
    pass


def _fail(message: str, code: ExitCode) -> int:
    print(f"error: {message}", file=sys.stderr)
    return int(code)


def _load_config(path: Optional[str], mock: bool) -> EngineConfig:
    try:
        config = load_config(path)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    except ValidationError as exc:
        raise UsageError(_format_validation(exc)) from None
    if mock:
        config = config.model_copy(update={"mode": "mock"})
    return config


def _format_validation(exc: ValidationError) -> str:
    return "; ".join(f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in exc.errors())


def _load_script(path: Optional[str]) -> Optional[list[dict[str, Any]]]:
    if path is None:
        return None
    try:
        return ScriptedMock.load(path).script()
    except (OSError, ValueError, TypeError) as exc:
        raise UsageError(f"cannot load mock script {path}: {exc}") from None


def _session_exit(exc: SessionFailed) -> int:
    cause = exc.cause
    if isinstance(cause, ProviderError):
        return _fail(f"provider error: {cause}", ExitCode.PROVIDER)
    return _fail(f"session failed: {exc}", ExitCode.SESSION_FAILED)


def _print_answer(final: FinalAnswer) -> None:
    if not final.verified:
        print("UNVERIFIED: the answer did not pass the final quality check")
    if final.chosen_option:
        print(final.chosen_option)
    print(final.answer_text)


def _parse_option(spec: str) -> Option:
    letter, sep, text = spec.partition(":")
    if not sep:
        raise UsageError(f"--option must look like LETTER:text, got {spec!r}")
    return Option(letter=letter.strip().upper(), text=text.strip())


def cmd_ask(args: argparse.Namespace) -> int:
    config = _load_config(args.config, mock=args.mock_script is not None)
    script = _load_script(args.mock_script)
    try:
        options = [_parse_option(o) for o in args.option] or None
        images = [ImageRef(id=f"img{i}", uri=uri) for i, uri in enumerate(args.image, 1)]
        metadata = {k: v for k, v in (("time", args.time), ("location", args.location)) if v}
        query = Query(text=args.question, images=images, options=options, metadata=metadata, seed=args.seed)
    except ValidationError as exc:
        raise UsageError(_format_validation(exc)) from None
    try:
        final = run_session(query, config, script=script, trace_path=args.trace_out)
    except SessionFailed as exc:
        return _session_exit(exc)
    except ProviderError as exc:
        return _fail(f"provider error: {exc}", ExitCode.PROVIDER)
    _print_answer(final)
    return ExitCode.OK


def cmd_bench(args: argparse.Namespace) -> int:
    config = _load_config(args.config, mock=args.mock_script is not None)
    script = _load_script(args.mock_script)
    if args.concurrency < 1:
        raise UsageError("--concurrency must be >= 1")
    try:
        records = load_dataset(args.dataset)
    except DatasetError as exc:
        for line, msg in exc.problems:
            print(f"{args.dataset}:{line}: {msg}", file=sys.stderr)
        return _fail(f"dataset validation failed ({len(exc.problems)} bad line(s))", ExitCode.USAGE)
    except OSError as exc:
        raise UsageError(f"cannot read dataset: {exc}") from None
    results_out = args.results_out or f"{args.report_out}.results.jsonl"
    try:
        report, _rows = run_bench(records, config, concurrency=args.concurrency, script=script,
                                  trace_dir=args.trace_dir, results_path=results_out)
    except ProviderError as exc:
        return _fail(f"provider error: {exc}", ExitCode.PROVIDER)
    Path(args.report_out).write_text(render(report, args.format), encoding="utf-8")
    print(f"overall={report.overall_accuracy * 100:.2f} macro={report.macro_average * 100:.2f} n={report.n}")
    return ExitCode.OK


def cmd_replay(args: argparse.Namespace) -> int:
    try:
        final = replay(args.trace)
    except (FileNotFoundError, TraceParseError, SequencingError) as exc:
        raise UsageError(str(exc)) from None
    except SessionFailed as exc:
        return _session_exit(exc)
    except ReplayError as exc:
        return _fail(str(exc), ExitCode.SESSION_FAILED)
    _print_answer(final)
    return ExitCode.OK


def cmd_validate_config(args: argparse.Namespace) -> int:
    config = _load_config(args.config, mock=False)
    for key, value in flatten(config):
        print(f"{key}={json.dumps(value) if not isinstance(value, str) else value}")
    return ExitCode.OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="agro", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ask = sub.add_parser("ask", help="answer a single question")
    ask.add_argument("--question", required=True)
    ask.add_argument("--image", action="append", default=[], help="image path or URL (repeatable)")
    ask.add_argument("--option", action="append", default=[], help='answer option "LETTER:text" (repeatable)')
    ask.add_argument("--config")
    ask.add_argument("--seed", type=int, default=0)
    ask.add_argument("--trace-out")
    ask.add_argument("--mock-script")
    ask.add_argument("--time", help="ISO-8601 date context")
    ask.add_argument("--location", help="location context")
    ask.set_defaults(func=cmd_ask)

    bench = sub.add_parser("bench", help="run a benchmark dataset")
    bench.add_argument("--dataset", required=True)
    bench.add_argument("--config")
    bench.add_argument("--report-out", required=True)
    bench.add_argument("--format", choices=["markdown", "csv", "json"], default="markdown")
    bench.add_argument("--concurrency", type=int, default=1)
    bench.add_argument("--mock-script")
    bench.add_argument("--results-out", help="per-record JSONL (default: <report-out>.results.jsonl)")
    bench.add_argument("--trace-dir", help="write one trace per record here")
    bench.set_defaults(func=cmd_bench)

    rep = sub.add_parser("replay", help="re-run a mock-mode trace")
    rep.add_argument("--trace", required=True)
    rep.set_defaults(func=cmd_replay)

    val = sub.add_parser("validate-config", help="validate a config file and print resolved values")
    val.add_argument("--config")
    val.set_defaults(func=cmd_validate_config)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return int(args.func(args))
    except (UsageError, FixtureError) as exc:
        return _fail(str(exc), ExitCode.USAGE)
    except AgroError as exc:
        return _fail(str(exc), ExitCode.SESSION_FAILED)


if __name__ == "__main__":
    sys.exit(main())
