"""Exception hierarchy.

Every error carries an ``exit_code`` so the command line can map failures to
its documented codes without inspecting message text.
"""

from __future__ import annotations


class SGRAGError(Exception):
    exit_code = 5


class UsageError(SGRAGError):
    exit_code = 2


class DataError(SGRAGError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, field: str, message: str) -> None:
        super().__init__(f"{field}: {message}")
        self.field = field


class ReferentialIntegrityError(DataError):
    def __init__(self, missing_id: int, message: str | None = None) -> None:
        super().__init__(message or f"relation references unknown object id {missing_id}")
        self.missing_id = missing_id


class ValidationError(DataError):
    pass


class InputError(DataError):
    pass


class DimensionError(DataError):
    pass


class VocabularyError(DataError):
    pass


class ConflictError(DataError):
    pass


class ConfigurationError(UsageError):
    pass


class NonDifferentiablePointError(DataError):
    def __init__(self, coordinates: list[int]) -> None:
        super().__init__(f"fusion is not differentiable at coordinates {coordinates} (a + b == 0)")
        self.coordinates = coordinates


class IndexFormatError(DataError):
    pass


class VersionMismatchError(IndexFormatError):
    pass


class ChecksumError(IndexFormatError):
    pass


class TruncatedFileError(ChecksumError):
    """The file ends before its declared content; also an integrity failure."""


class TransportError(SGRAGError):
    """Network failure that survived every retry attempt."""

    exit_code = 4

    def __init__(self, message: str, attempts: int = 0, retryable: bool = True) -> None:
        super().__init__(message)
        self.attempts = attempts
        self.retryable = retryable


class APIError(TransportError):
    """Non-retryable response from a remote service."""

    def __init__(self, status: int, body_excerpt: str) -> None:
        super().__init__(f"remote returned HTTP {status}: {body_excerpt}", attempts=1, retryable=False)
        self.status = status
        self.body_excerpt = body_excerpt


class StageError(SGRAGError):
    """Wraps a failure raised inside one stage of the ask pipeline."""

    def __init__(self, stage: str, cause: Exception) -> None:
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 5)
