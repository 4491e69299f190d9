"""Exception hierarchy shared by every a5 module."""


class A5Error(Exception):
    """Base class for all errors raised by a5."""


class ShapeError(A5Error, ValueError):
    """Tensor or layer shapes do not agree."""


class NumericError(A5Error, ArithmeticError):
    """A loss, gradient or tensor became non-finite."""


class CheckpointError(A5Error, IOError):
    """Checkpoint file is malformed, truncated or incompatible."""


class FormatError(A5Error, ValueError):
    """An input data file (IDX, PGM) violates its format."""


class ConfigError(A5Error, ValueError):
    """Run configuration is missing a field or holds an invalid value."""
