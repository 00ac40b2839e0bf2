"""Error taxonomy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, NumericError -> 4.  Library code raises them directly;
plain ValueError is reserved for programming errors at API boundaries.
"""

from __future__ import annotations


class TrvError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(TrvError):
    """Invalid or unknown configuration (bad key, out-of-range value)."""


class DataError(TrvError):
    """Malformed or missing input data (files, manifests, rasters)."""


class NumericError(TrvError):
    """Numerically invalid state (uninitialized vectors, degenerate input)."""


class EmptyRegionError(NumericError):
    """A sampling region is empty; callers treat this as 'skip frame'."""
