"""Exception hierarchy."""

from __future__ import annotations


class AgroError(Exception):
    pass


class SequencingError(AgroError):
    pass


class TraceParseError(AgroError):
    def __init__(self, line: int, message: str) -> None:
        super().__init__(f"line {line}: {message}")
        self.line = line


class BackendError(AgroError):
    pass


class ProviderError(BackendError):
    """Non-2xx response or unreachable provider."""

    def __init__(self, message: str, status: int | None = None, body: str = "") -> None:
        super().__init__(message)
        self.status = status
        self.body = body


class BackendTimeout(ProviderError):
    pass


class ScriptExhaustedError(BackendError):
    def __init__(self, step: str) -> None:
        super().__init__(f"mock script has no unconsumed entry matching step {step!r}")
        self.step = step


class StructuredParseError(BackendError):
    def __init__(self, message: str, raw_texts: list[str]) -> None:
        super().__init__(message)
        self.raw_texts = raw_texts


class RegistryError(AgroError):
    pass


class ToolError(AgroError):
    pass


class FixtureError(AgroError):
    pass


class SessionFailed(AgroError):
    """Raised by ``run_session`` when the session ends with status ``failed``."""

    def __init__(self, message: str, state=None, cause: BaseException | None = None) -> None:
        super().__init__(message)
        self.state = state
        self.cause = cause


class ReplayError(AgroError):
    pass


class ReplayUnsupported(ReplayError):
    pass


class DatasetError(AgroError):
    def __init__(self, problems: list[tuple[int, str]]) -> None:
        lines = "; ".join(f"line {n}: {msg}" for n, msg in problems)
        super().__init__(f"{len(problems)} invalid record(s): {lines}")
        self.problems = problems


class AggregationError(AgroError):
    pass
