"""Exception types shared across the package.

The CLI maps these onto exit codes (config 2, data 3, numeric 4); library
code raises plain ValueError for argument/shape violations.
"""


class ConfigError(Exception):
    """Invalid or inconsistent run configuration."""


class DataError(Exception):
    """Corrupt, missing, or mismatched input data."""


class NumericError(Exception):
    """Numerical failure: NaN loss, diverged training, failed gradient check."""


class EvaluationError(ValueError):
    """Metric is undefined for the given inputs (e.g. single-class AUC)."""
