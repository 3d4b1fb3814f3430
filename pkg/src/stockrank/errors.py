"""Exception hierarchy shared across the pipeline.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class StockrankError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(StockrankError):
    """Invalid or inconsistent run configuration."""


class DataError(StockrankError):
    """Malformed, missing, or misaligned input data."""


class NumericError(StockrankError):
    """A numeric procedure failed (non-convergence, undefined metric)."""
