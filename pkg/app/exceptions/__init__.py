"""
Error hierarchy shared by every module of the engine.

Rejected input (bad values, bad configuration) derives from ``ValueError`` so
callers can keep catching the built-in type; failures that only show up while
a run is in progress derive from ``RuntimeError``.
"""

from typing import Optional


class EngineError(Exception):
    """Base class for all errors raised by the engine."""


class ConfigurationError(EngineError, ValueError):
    """A configuration, species definition or box geometry was rejected."""


class ConfigParseError(ConfigurationError):
    """
    A config file line could not be parsed.

    **Parameters:**
    - `message (str)`: What went wrong.
    - `lineno (int | None)`: 1-based line number in the config file, if known.
    - `key (str | None)`: The offending key, if known.
    """

    def __init__(self, message: str, lineno: Optional[int] = None, key: Optional[str] = None) -> None:
        self.lineno = lineno
        self.key = key
        prefix = f"line {lineno}: " if lineno is not None else ""
        super().__init__(f"{prefix}{message}")


class UnknownDimensionError(EngineError, ValueError):
    """A unit conversion was requested for a dimension tag that does not exist."""


class SingularOverlapError(EngineError, ValueError):
    """Two interaction sites sit at exactly the same position."""


class UndefinedTemperatureError(EngineError, ValueError):
    """Temperature of an empty system (or one without degrees of freedom)."""


class CannotRescaleError(EngineError, ValueError):
    """Velocity rescaling was requested for a system at zero temperature."""


class IndivisibleVolumeError(EngineError, ValueError):
    """A load profile is too short to be split with two cells on each side."""


class OverDecomposedError(EngineError, ValueError):
    """The cell grid cannot host the requested number of workers."""


class InfeasibleDensityError(EngineError, ValueError):
    """A scenario asked for more molecules than its lattice can hold."""


class InstabilityError(EngineError, RuntimeError):
    """The integration blew up: non-finite forces or a molecule jumping cells."""


class WorkerFailureError(EngineError, RuntimeError):
    """A parallel worker stopped unexpectedly and the run was aborted."""
