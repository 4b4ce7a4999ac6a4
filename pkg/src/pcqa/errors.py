"""Exception types. The CLI maps each family to its own exit code."""


class PCQAError(Exception):
    exit_code = 1


class ConfigError(PCQAError, ValueError):
    exit_code = 2


class DataError(PCQAError, ValueError):
    exit_code = 3


class NumericError(PCQAError, ArithmeticError):
    exit_code = 4
