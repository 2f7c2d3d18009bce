"""Exception types shared across the package."""


class InvalidParameterError(ValueError):
    pass


class NoRealRootError(ValueError):
    pass


class InvalidConstantsError(ValueError):
    pass


class ZeroProbabilityAtomError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class RegressionSingularError(RuntimeError):
    pass


class NoConvergenceError(RuntimeError):
    """Raised when a fixed-point loop exhausts its iteration budget.

    ``history`` holds the discounted-norm residual of every completed sweep;
    ``where`` names the stage (e.g. a continuation step) that failed.
    """

    def __init__(self, message, history=(), where=None):
        super().__init__(message)
        self.history = list(history)
        self.where = where
