"""Shared exception hierarchy.

Two broad families matter to callers: ``DataError`` for anything wrong with
inputs, files, or labels, and ``NumericError`` for NaN/Inf blowups during
computation.  The command-line driver maps them to distinct exit codes.
"""


class LungsoundError(Exception):
    """Base class for all package-specific errors."""


class DataError(LungsoundError):
    """Invalid or inconsistent input data (files, labels, shapes of records)."""


class NumericError(LungsoundError):
    """A computation produced non-finite values."""


class UsageError(LungsoundError):
    """Bad command-line arguments or configuration."""
