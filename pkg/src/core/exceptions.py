"""
Exception hierarchy for occ-forge.

Every error raised on purpose by the library derives from OccForgeError so
the CLI can map it to an exit code in one place.
"""

from typing import Any, Dict, Optional


class OccForgeError(Exception):
    """Base class for all occ-forge errors."""

    exit_code: int = 1

    def __init__(self, message: str, context: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.context = context or {}

    def __str__(self) -> str:
        if not self.context:
            return self.message
        details = ", ".join(f"{key}={value}" for key, value in sorted(self.context.items()))
        return f"{self.message} ({details})"


class ConfigError(OccForgeError):
    """Invalid parameter or configuration file."""

    exit_code = 2


class DataError(OccForgeError):
    """Malformed, missing or inconsistent input data."""

    exit_code = 3


class DimensionMismatchError(DataError):
    """Two arrays that must agree in shape do not."""

    @classmethod
    def check(cls, name_a: str, shape_a: Any, name_b: str, shape_b: Any) -> None:
        """Raise when two shapes differ."""
        if tuple(shape_a) != tuple(shape_b):
            raise cls(
                f"{name_a} and {name_b} must have the same shape",
                {name_a: tuple(shape_a), name_b: tuple(shape_b)},
            )


class GeometryError(DataError):
    """Invalid camera model or projection input."""


class LossInputError(DataError):
    """Loss inputs outside their domain (targets, probabilities)."""
