"""Exception hierarchy shared by every module.

Each class carries the process exit code the CLI maps it to.
"""


class AdvShieldError(Exception):
    exit_code = 1


class ConfigError(AdvShieldError):
    exit_code = 2


class InputError(AdvShieldError):
    exit_code = 2


class StateError(AdvShieldError):
    exit_code = 2


class FormatError(AdvShieldError):
    exit_code = 3


class DataError(AdvShieldError):
    exit_code = 3


class NumericError(AdvShieldError):
    exit_code = 4


class UndefinedMetricError(InputError):
    """A metric needs both classes present and one is missing."""
