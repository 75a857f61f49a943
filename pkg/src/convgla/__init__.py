"""Conv-gated linear attention: reference kernels, a small trainable model,
a two-stage distillation recipe, synthetic retrieval tasks, and a prefill
latency harness. Pure numpy, float64 everywhere.
"""

from .errors import ConfigError, DataError, NumericError, OracleSizeError, ShapeError

__all__ = [
    "ConfigError",
    "DataError",
    "NumericError",
    "OracleSizeError",
    "ShapeError",
]

__version__ = "0.1.0"
