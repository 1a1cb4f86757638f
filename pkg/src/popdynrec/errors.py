"""Exception hierarchy shared by the library and the CLI.

Each class carries the process exit code the CLI maps it to.
"""


class PopDynError(Exception):
    exit_code = 1


class ConfigError(PopDynError, ValueError):
    """Invalid configuration value or incompatible settings."""

    exit_code = 2


class DataError(PopDynError):
    """Input data is unreadable, malformed, or inconsistent."""

    exit_code = 3


class EmptyDatasetError(DataError):
    pass


class SamplingError(DataError):
    pass


class NumericalError(PopDynError, ArithmeticError):
    """Non-finite loss or diverging optimisation."""

    exit_code = 4


class ShapeError(PopDynError, ValueError):
    exit_code = 2
