"""Exception hierarchy shared by the library and the CLI.

Each class carries the process exit code the CLI maps it to.
"""


class GUNetError(Exception):
    exit_code = 5


class UsageError(GUNetError):
    exit_code = 1


class DataIOError(GUNetError):
    exit_code = 2


class ConfigError(GUNetError, ValueError):
    exit_code = 3


class ShapeError(ConfigError):
    pass


class ContractError(ConfigError):
    pass


class FingerprintError(ConfigError):
    pass


class NumericError(GUNetError, FloatingPointError):
    exit_code = 4
