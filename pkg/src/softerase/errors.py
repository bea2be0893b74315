"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class SoftEraseError(Exception):
    exit_code = 3


class ParameterError(SoftEraseError, ValueError):
    """Invalid argument or configuration value."""

    exit_code = 1


class DataError(SoftEraseError, ValueError):
    """Malformed or invalid corpus, score file, or parameter file."""

    exit_code = 2


class NumericError(SoftEraseError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class ShapeError(SoftEraseError, ValueError):
    pass


class ConsistencyError(SoftEraseError, RuntimeError):
    """Stale or mismatched artifacts (e.g. a trace computed with other parameters)."""


class TrainingError(NumericError):
    def __init__(self, message: str, epoch: int):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch
