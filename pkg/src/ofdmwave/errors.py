"""Exception types shared across the package."""


class OfdmWaveError(Exception):
    """Base class for all package errors."""


class ConfigError(OfdmWaveError, ValueError):
    """Invalid configuration or parameter combination."""


class DimensionError(OfdmWaveError, ValueError):
    """Array shapes or lengths do not match."""


class NumericalError(OfdmWaveError, ArithmeticError):
    """A numerical routine failed or produced an unusable value."""
