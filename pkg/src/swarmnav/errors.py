"""Shared exception hierarchy.

The CLI maps these onto exit codes: ConfigError -> 2,
IncompatibilityError -> 3, NumericError -> 4.
"""


class SwarmNavError(Exception):
    """Base class for all package errors."""


class ConfigError(SwarmNavError):
    """Invalid configuration value or malformed input file."""


class IncompatibilityError(SwarmNavError):
    """Artifact produced by an incompatible version or configuration."""


class NumericError(SwarmNavError):
    """Non-finite value where the computation requires finite numbers."""


class ProtocolError(SwarmNavError):
    """API called out of sequence or with mismatched state."""
