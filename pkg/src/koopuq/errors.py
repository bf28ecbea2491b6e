"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class KoopUQError(Exception):
    exit_code = 1


class ConfigError(KoopUQError, ValueError):
    exit_code = 2


class DataError(KoopUQError, ValueError):
    exit_code = 3


class InsufficientHistoryError(DataError):
    pass


class DivergenceError(KoopUQError, ArithmeticError):
    """A numerical iteration produced non-finite values.

    ``step`` is the step/iteration index at which it happened; ``trace`` may
    hold whatever diagnostics the raiser collected up to that point.
    """

    exit_code = 4

    def __init__(self, message, step=None, trace=None):
        super().__init__(message)
        self.step = step
        self.trace = trace


class IntegrationDivergedError(DivergenceError):
    pass


class RolloutDivergedError(DivergenceError):
    pass


class SolverDivergedError(DivergenceError):
    pass
