"""Exception hierarchy shared by all pipeline stages.

Each class maps to one CLI exit code so shell scripts can branch on the
failure family without parsing messages.
"""

from __future__ import annotations


class CapforgeError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(CapforgeError):
    """Invalid configuration: bad preset, bad fractions, impossible sizes."""

    exit_code = 2


class InputError(CapforgeError):
    """Invalid operands passed to an operation (empty corpus, shape mismatch)."""

    exit_code = 3


class DataError(CapforgeError):
    """Malformed or inconsistent data artifacts (bad JSONL, duplicate ids,
    out-of-range codes)."""

    exit_code = 3


class TrainingError(CapforgeError):
    """Training diverged or could not proceed; carries the failing step."""

    exit_code = 4

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class MetricError(CapforgeError):
    """A metric backend failed for an item."""

    exit_code = 5
