"""Exception hierarchy shared by every kamac module."""

from __future__ import annotations


class KamacError(Exception):
    """Base class for all errors raised by this package."""


class InvalidRoleError(KamacError, ValueError):
    pass


class EmptyInputError(KamacError, ValueError):
    pass


class ValidationError(KamacError, ValueError):
    """A domain object was constructed with values that break its invariants."""


class GatewayError(KamacError):
    pass


class GatewayUnavailable(GatewayError):
    """Transport failed on every allowed attempt. ``cause`` holds the last failure."""

    def __init__(self, message: str, cause: BaseException | None = None, attempts: int = 0):
        super().__init__(message)
        self.cause = cause
        self.attempts = attempts


class TransportError(GatewayError):
    """A single retryable transport failure (timeouts, 5xx, rate limits)."""


class ProtocolError(GatewayError):
    """The backend answered with a payload that cannot be used."""


class UnscriptedCallError(GatewayError):
    """The scripted backend received a request no script rule matches."""


class UnboundPlaceholderError(KamacError, KeyError):
    def __init__(self, template_id: str, missing: list[str]):
        self.template_id = template_id
        self.missing = sorted(missing)
        super().__init__(f"template {template_id} has unbound placeholders: {', '.join(self.missing)}")

    def __str__(self) -> str:
        return self.args[0]


class EmptyRosterError(KamacError, ValueError):
    pass


class UnparseableAnswerError(KamacError, ValueError):
    pass


class DatasetError(KamacError, ValueError):
    pass


class SchemaError(DatasetError):
    def __init__(self, missing: list[str]):
        self.missing = list(missing)
        super().__init__(f"missing mandatory columns: {', '.join(self.missing)}")


class TranscriptError(KamacError):
    pass


class IncompatibleTranscriptError(TranscriptError):
    pass


class TranscriptNotFoundError(TranscriptError, FileNotFoundError):
    pass
