"""Error taxonomy shared across the routing stack.

Every exception raised on purpose by this package derives from
:class:`SelfRouteError` so callers can catch one base type at pipeline
boundaries.  Errors that surface mid-pipeline may carry a ``stage`` tag
(for example ``"preinference"`` or ``"answer"``) naming the step that
failed.
"""

from __future__ import annotations


class SelfRouteError(Exception):
    """Base class for all errors raised by this package."""

    stage: str | None = None

    def __str__(self) -> str:  # pragma: no cover - trivial formatting
        base = super().__str__()
        if self.stage:
            return f"[{self.stage}] {base}"
        return base


class DomainError(SelfRouteError):
    """An argument fell outside its documented domain."""


class ConfigError(SelfRouteError):
    """A configuration value or file is invalid."""


class TransportError(SelfRouteError):
    """A remote backend could not be reached or failed at the HTTP layer."""


class ProtocolError(SelfRouteError):
    """A remote backend replied with a malformed or incomplete payload."""


class CapabilityError(SelfRouteError):
    """A backend was asked for an operation it does not advertise."""


class MissingGoldError(SelfRouteError):
    """An operation that needs a gold answer got a query without one."""


class DatasetConstructionError(SelfRouteError):
    """A dataset could not be assembled as requested."""


class TrainingDivergedError(SelfRouteError):
    """Router training produced a non-finite loss."""


class ReportError(SelfRouteError):
    """An evaluation report could not be assembled from its inputs."""
