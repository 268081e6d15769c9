"""Exception hierarchy shared by all oodeval modules."""

from __future__ import annotations


class OODEvalError(Exception):
    """Base class for every error raised by this package."""


class DataError(OODEvalError, ValueError):
    """Malformed, inconsistent or unreadable input data."""


class FormatError(DataError):
    """A matrix or state file does not follow the on-disk layout."""


class DegenerateError(OODEvalError, ArithmeticError):
    """A statistic is mathematically undefined for the given data."""
