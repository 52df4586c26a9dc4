"""Exception types shared across the package."""


class GvqError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(GvqError, ValueError):
    """Tensor shapes are inconsistent with an operation's contract."""


class ConfigError(GvqError, ValueError):
    """A configuration value or combination of values is invalid."""


class NumericError(GvqError, ArithmeticError):
    """A numeric contract was violated (non-finite values, bad magnitudes)."""


class FormatError(GvqError, ValueError):
    """A serialized file is malformed (bad magic, version, truncation)."""


class StaleCodebookError(GvqError, RuntimeError):
    """A quantization result is being replayed against a modified codebook."""
