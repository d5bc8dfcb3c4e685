"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Dimension mismatch between arrays; message names the offending dims."""


class ConfigError(ValueError):
    """Inconsistent or out-of-range configuration."""


class RowParseError(ValueError):
    """A single malformed input row; counted and skipped by the harness."""


class GradientError(RuntimeError):
    """Non-finite gradient; message names the parameter group."""


class EvalError(ValueError):
    """Invalid metric input (out-of-range prediction, empty aggregation)."""


class DatasetError(RuntimeError):
    """Unreadable, empty, or schema-incompatible dataset."""
