"""Exception hierarchy shared across the package."""

from __future__ import annotations

from typing import Any


class SafeProjError(Exception):
    """Base class for all package errors."""


class InvalidEmbeddingError(SafeProjError, ValueError):
    """Zero-norm, non-finite, empty, or dimension-mismatched embedding."""


class BackendUnavailableError(SafeProjError):
    """A remote backend could not be reached after the configured retries."""

    def __init__(self, backend: str, reason: str) -> None:
        super().__init__(f"{backend} unavailable: {reason}")
        self.backend = backend
        self.reason = reason


class ScorerUnavailableError(BackendUnavailableError):
    pass


class ProtocolError(SafeProjError):
    """A backend answered, but the response did not have the expected shape."""


class ProjectionUnavailableError(SafeProjError):
    """Stage-1 search aborted because a backend failed.

    ``trace`` holds whatever was completed before the failure.
    """

    def __init__(self, message: str, trace: Any = None) -> None:
        super().__init__(message)
        self.trace = trace


class CascadeError(SafeProjError):
    """Projected-reference sampling aborted; ``attempts`` is the partial record."""

    def __init__(self, message: str, attempts: list[Any] | None = None) -> None:
        super().__init__(message)
        self.attempts = list(attempts or [])


class InfeasibleProjectionError(SafeProjError):
    """No prompt satisfies the tolerance, so there is nothing to project onto."""


class ConfigError(SafeProjError, ValueError):
    pass
