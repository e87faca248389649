"""Exception types shared across the package."""


class DbqError(Exception):
    """Base class for all package errors."""


class DimensionError(DbqError):
    """Tensor shapes do not line up for the requested operation."""


class ArgumentError(DbqError):
    """An argument is outside its documented range."""


class NumericError(DbqError):
    """A computation produced non-finite values."""


class ConfigError(DbqError):
    """A run configuration is malformed or inconsistent."""


class CalibrationError(DbqError):
    """Latency calibration could not produce usable timings."""


class DataError(DbqError):
    """Input data violates a precondition (too few points, bad labels...)."""


class FormatError(DbqError):
    """A file does not conform to its on-disk format."""
