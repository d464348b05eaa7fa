"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class LBEBMError(Exception):
    exit_code = 1


class ConfigError(LBEBMError):
    exit_code = 1


class DimensionError(LBEBMError, ValueError):
    exit_code = 1


class TapeUsageError(LBEBMError, RuntimeError):
    exit_code = 1


class DataError(LBEBMError):
    exit_code = 2


class ParseError(DataError):
    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


class NumericalError(LBEBMError, FloatingPointError):
    exit_code = 3
