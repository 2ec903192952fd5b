"""
Error Types

Exceptions raised by the geodesic engine. The experiment runner maps
ConfigError to a usage failure and every other GeodesicError to a
numerical failure.
"""
from typing import Optional


class GeodesicError(Exception):
    """Base class for all toolkit errors."""


class DomainError(GeodesicError):
    """A point lies outside the closed (or padded) domain."""


class PreconditionError(GeodesicError):
    """An operation was called with inputs violating its precondition."""


class TrappedGeodesicError(GeodesicError):
    """A geodesic did not reach the boundary within the time budget."""


class ConfigError(GeodesicError):
    """Experiment configuration failed to parse or validate."""

    def __init__(self, message: str, line: Optional[int] = None, source: Optional[str] = None):
        self.line = line
        self.source = source
        location = ""
        if source is not None:
            location = f"{source}"
        if line is not None:
            location = f"{location}:{line}" if location else f"line {line}"
        super().__init__(f"{location}: {message}" if location else message)
