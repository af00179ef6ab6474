"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ``ConfigError`` -> 1,
``DataError`` -> 2, ``NumericError`` -> 3.
"""

from __future__ import annotations


class JointAugError(Exception):
    """Base class for all package errors."""


class ConfigError(JointAugError, ValueError):
    """Invalid configuration, shapes or arguments."""


class DataError(JointAugError):
    """Malformed or invalid dataset content."""


class DatasetFormatError(DataError):
    """A dataset file could not be parsed (header, magic, payload)."""


class DatasetValidationError(DataError):
    """A dataset parsed correctly but violates a content invariant."""


class NumericError(JointAugError, FloatingPointError):
    """A loss or tensor became non-finite."""
