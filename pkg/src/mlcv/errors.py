"""Exception types shared across the package.

The CLI maps these onto process exit codes, so library code should raise
the most specific type that applies rather than bare ValueError.
"""


class ConfigError(ValueError):
    """Invalid configuration: unknown keys, bad tags, out-of-range settings."""


class DimensionError(ValueError):
    """Shape or size mismatch between arrays, levels, or requested ranks."""


class DataError(ValueError):
    """Input data is unusable: empty, non-finite, or inconsistent."""


class NumericalError(RuntimeError):
    """A numerical procedure failed (singular solve, non-finite output)."""
