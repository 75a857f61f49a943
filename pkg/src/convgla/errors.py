"""Shared exception types."""


class ConfigError(ValueError):
    """Invalid configuration value (bad kernel width, window < 1, rank <= 0, ...)."""


class ShapeError(ValueError):
    """Operand shapes do not conform; message names both shapes."""


class NumericError(FloatingPointError):
    """A forward op produced NaN/Inf; message names the op."""


class DataError(ValueError):
    """Invalid input data (empty sample set, token id out of range, ...)."""


class OracleSizeError(ConfigError):
    """Quadratic oracle asked to run above its hard size cap."""
