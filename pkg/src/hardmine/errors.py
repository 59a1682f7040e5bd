"""Exception hierarchy. CLI exit codes are keyed on these classes."""


class HardmineError(Exception):
    exit_code = 1


class ConfigError(HardmineError, ValueError):
    exit_code = 2


class DataError(HardmineError, ValueError):
    """Structural problems with inputs: shapes, frame sets, missing files."""

    exit_code = 3


class NumericError(HardmineError, ArithmeticError):
    exit_code = 4


class TrainingError(NumericError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class BoundaryTieError(NumericError):
    """LRM selection would change inside a finite-difference step."""


class DomainError(HardmineError, ValueError):
    """An input lies outside the mathematical domain of an operation."""

    exit_code = 3
