"""Exception hierarchy shared by all platform modules."""

from __future__ import annotations

from typing import Any


class PlatformError(Exception):
    """Base class for domain errors; the CLI maps these to exit code 1."""

    code = "platform_error"

    def __init__(self, message: str, **details: Any) -> None:
        super().__init__(message)
        self.message = message
        self.details = details

    def to_dict(self) -> dict[str, Any]:
        return {"error": self.code, "message": self.message, **self.details}


class FormatError(PlatformError):
    code = "parse_error"

    def __init__(self, message: str, line: int | None = None, **details: Any) -> None:
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message, line=line, **details)
        self.line = line


class IntegrityError(FormatError):
    code = "integrity_error"


class InvariantViolation(PlatformError):
    code = "invariant_violation"


class NotFound(PlatformError):
    code = "not_found"


class Conflict(PlatformError):
    code = "conflict"


class AccessDenied(PlatformError):
    code = "access_denied"


class DataWithheld(AccessDenied):
    code = "data_withheld"


class ReferencedNode(Conflict):
    code = "referenced"


class ExecutionError(PlatformError):
    code = "execution_error"


class ImageNotFound(ExecutionError):
    code = "image_not_found"


class SandboxUnavailable(ExecutionError):
    code = "sandbox_unavailable"


class IntegrityMismatch(PlatformError):
    """A file's content no longer matches its recorded digest."""

    code = "digest_mismatch"


class EvaluationRefused(PlatformError):
    code = "evaluation_refused"
