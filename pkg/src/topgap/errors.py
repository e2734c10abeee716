"""Exception hierarchy shared by every module.

Each class carries the process exit code the command line maps it to.
"""


class TopGapError(Exception):
    exit_code = 1


class ConfigurationError(TopGapError, ValueError):
    exit_code = 2


class ConstraintError(ConfigurationError):
    """A value lies outside the range an operation accepts (e.g. ``k``)."""


class DataError(TopGapError, ValueError):
    exit_code = 3


class FormatError(DataError):
    """Malformed or corrupted checkpoint / image file."""


class NumericError(TopGapError, ArithmeticError):
    exit_code = 4


class StateError(TopGapError, RuntimeError):
    exit_code = 1
