"""Exception hierarchy shared by every module in the package."""

from __future__ import annotations


class MetaplanError(Exception):
    """Base class for all domain errors raised by this package."""


class SchemaViolation(MetaplanError, ValueError):
    """Input data does not satisfy a type invariant."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NoPlanFound(MetaplanError, ValueError):
    pass


class Unparseable(MetaplanError, ValueError):
    pass


class DuplicateId(MetaplanError, ValueError):
    pass


class DuplicateOperation(MetaplanError, ValueError):
    pass


class UnknownOperation(MetaplanError, KeyError):
    def __str__(self) -> str:  # KeyError repr-quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class NotValidated(MetaplanError, ValueError):
    pass


class EmptyInput(MetaplanError, ValueError):
    pass


class EmptyGroundTruth(MetaplanError, ValueError):
    pass


class InsufficientRuns(MetaplanError, ValueError):
    pass


class UnvalidatedTeacher(MetaplanError, ValueError):
    pass


class BaselineMissing(MetaplanError, ValueError):
    pass


class UnknownTask(MetaplanError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class PositiveLogProb(MetaplanError, ValueError):
    pass


class BackendError(MetaplanError):
    """Base class for chat-completion backend failures."""


class TransportError(BackendError):
    pass


class BackendTimeout(TransportError):
    pass


class AuthMissing(BackendError):
    pass


class QueueExhausted(BackendError):
    pass


class PlanUnparseable(MetaplanError):
    pass


class DuplicateTool(MetaplanError, ValueError):
    pass


class UnregisteredTool(MetaplanError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""
