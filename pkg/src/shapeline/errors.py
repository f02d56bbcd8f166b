"""Exception hierarchy shared by every module.

Each class carries the process exit code the CLI maps it to.
"""


class ShapelineError(Exception):
    exit_code = 1


class ConfigError(ShapelineError, ValueError):
    exit_code = 2


class ShapeMismatchError(ConfigError):
    """Tensor shapes disagree with each other or with a config."""


class InvalidHyperparameterError(ConfigError):
    pass


class DataIOError(ShapelineError, OSError):
    exit_code = 3


class MalformedFileError(DataIOError):
    pass


class UnsupportedEncodingError(DataIOError):
    pass


class ChecksumError(DataIOError):
    pass


class NumericalError(ShapelineError, ArithmeticError):
    exit_code = 4


class ProtocolError(ShapelineError):
    """Label-set or evaluation-protocol violation."""

    exit_code = 5


class StaleGraphError(ShapelineError, RuntimeError):
    """backward() called without recorded forward intermediates."""
