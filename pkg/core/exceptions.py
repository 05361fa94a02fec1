"""
Error hierarchy for CarpetLab.

Every failure the lab raises on purpose derives from ``CarpetLabError`` so the
command-line front door can map it to an exit code without guessing.
"""
from __future__ import annotations


class CarpetLabError(Exception):
    """Base class for deliberate lab failures."""


class ParameterDomainError(CarpetLabError, ValueError):
    """A precondition on a numeric input does not hold."""

    def __init__(self, name: str, value: object, admissible: str):
        self.name = name
        self.value = value
        self.admissible = admissible
        super().__init__(f"{name}={value!r} is outside the admissible range {admissible}")


class HorizonError(CarpetLabError, ValueError):
    """A time beyond the last driving time was requested."""

    def __init__(self, t: float, horizon: float):
        self.t = t
        self.horizon = horizon
        super().__init__(f"time {t} exceeds the driver horizon {horizon}")


class GridCapacityError(CarpetLabError, MemoryError):
    """The configured memory guard for lattice sizes was exceeded."""


class RejectionBudgetExceeded(CarpetLabError, RuntimeError):
    """A rejection sampler ran out of attempts."""


class ConfigError(CarpetLabError):
    """A run configuration failed validation."""


class RunAborted(CarpetLabError, RuntimeError):
    """A precondition failed after the run had already written artifacts."""

    def __init__(self, subcommand: str, n_written: int, cause: Exception):
        self.subcommand = subcommand
        self.n_written = n_written
        self.cause = cause
        super().__init__(f"{subcommand} stopped after writing {n_written} artifact(s): {cause}")
