"""Exception taxonomy shared by all fga modules.

Each class carries the CLI exit code used when it escapes to the top level:
1 for configuration problems, 2 for broken input data or files, 3 for
violated call contracts and internal invariants.
"""

from __future__ import annotations


class FgaError(Exception):
    exit_code = 3


class ConfigurationError(FgaError):
    """Bad experiment configuration: unknown keys, missing files named by
    config, features referencing unknown classes, unknown capture layers."""

    exit_code = 1


class DataFormatError(FgaError):
    """Malformed input data: bad magic numbers, count mismatches,
    manifest/blob disagreements."""

    exit_code = 2


class TruncationError(DataFormatError):
    """A payload ended before the length its header promised."""


class ModelValidationError(DataFormatError):
    """A model file parsed but its layers do not compose into a valid net."""


class ContractViolation(FgaError):
    """A documented precondition of an operation was violated by the caller."""


class InvariantViolation(FgaError):
    """An internal consistency check failed; indicates a bug, not bad input."""


class DegenerateRuleError(FgaError):
    """Canonicalization found contradictory atoms (an empty interval)."""
