"""Exception hierarchy shared by all ETDI modules."""

from __future__ import annotations


class ETDIError(Exception):
    """Base class for every error raised by this package."""


class InvalidDefinition(ETDIError, ValueError):
    pass


class EncodingError(ETDIError, ValueError):
    """A value cannot be put into canonical form (e.g. NaN, non-string key)."""


class IdMismatch(ETDIError, ValueError):
    pass


class NotFound(ETDIError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "not found"


class DuplicateKey(ETDIError, ValueError):
    pass


class StoreIOError(ETDIError, OSError):
    pass


class SubsetViolation(ETDIError, ValueError):
    pass


class InvalidClaims(ETDIError, ValueError):
    pass


class MalformedScope(ETDIError, ValueError):
    pass


class PolicyError(ETDIError, ValueError):
    pass


class ConditionSyntaxError(PolicyError):
    pass


class ConditionTypeError(PolicyError, TypeError):
    pass


class EmptyStore(PolicyError):
    def __init__(self, message: str, report: object = None) -> None:
        super().__init__(message)
        self.report = report


class InvalidPolicy(ETDIError, ValueError):
    """A call-stack policy violates its own invariants."""


class CallerMismatch(ETDIError, ValueError):
    pass


class StackMismatch(ETDIError, ValueError):
    pass


class UnknownTool(ETDIError, LookupError):
    pass


class UnknownScenario(ETDIError, LookupError):
    pass
