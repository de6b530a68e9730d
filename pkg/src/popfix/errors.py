"""Exception hierarchy shared across the engine."""

from __future__ import annotations


class PopfixError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(PopfixError):
    """A caller violated a documented precondition."""


class DatasetError(PopfixError):
    """A task file is malformed or fails schema validation."""

    def __init__(self, message: str, line_number: int | None = None):
        super().__init__(message if line_number is None else f"line {line_number}: {message}")
        self.line_number = line_number


class ParseError(PopfixError):
    """A generator response could not be parsed into a candidate.

    Carries the raw response so failed attempts can be inspected later.
    """

    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


class GeneratorFailure(PopfixError):
    """Base for backend failures the engine treats as a lost attempt."""


class TransportError(GeneratorFailure):
    """HTTP transport kept failing after the configured retries."""


class BackendError(GeneratorFailure):
    """The backend replied with something unusable (empty/non-JSON)."""


class ScriptExhaustedError(GeneratorFailure):
    """A scripted backend had no rule matching the request."""


class CacheMissError(PopfixError):
    """Replay backend has no recorded exchange for this prompt.

    Deliberately not a GeneratorFailure: a miss means the replayed
    trajectory diverged from the recording, so the run must abort
    rather than silently continue without a candidate.
    """


class EvaluationEnvironmentError(PopfixError):
    """The execution substrate itself is broken (not the candidate)."""


class ShimLaunchError(EvaluationEnvironmentError):
    """The sandbox interpreter command could not be started."""


class ShimProtocolError(EvaluationEnvironmentError):
    """The sandbox process replied outside the line-JSON protocol."""


class InitializationError(PopfixError):
    """Population initialization produced no usable candidate at all."""
