"""Exception types shared across the package.

The CLI maps these onto exit codes: config/usage problems exit 1, data
problems exit 2, numeric failures exit 3.
"""


class ConfigError(ValueError):
    """Bad run configuration: unknown keys, out-of-range values."""


class DataError(Exception):
    """On-disk inputs are missing, malformed, or inconsistent."""


class NumericError(Exception):
    """A numeric invariant broke: non-finite values, failed gradient check."""


class UndefinedMetricError(ValueError):
    """A metric is undefined for the given inputs (e.g. AP with no positives)."""
