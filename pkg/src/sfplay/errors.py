"""Exception hierarchy shared by every module of the package."""


class SfplayError(Exception):
    """Base class for all library errors."""


class StructuralError(SfplayError, ValueError):
    """Shapes or dimensions of the inputs do not fit together."""


class DomainError(SfplayError, ValueError):
    """An argument lies outside the domain of the operation."""


class PreconditionError(DomainError):
    """A documented precondition of the operation does not hold."""


class ContractViolation(SfplayError):
    """A user supplied callable broke its contract."""


class TimeRangeError(SfplayError, ValueError):
    """A query time falls outside the recorded range of a trajectory."""


class DivergenceError(SfplayError, ArithmeticError):
    """A simulated state became non-finite or left its bounding box."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class NonConvergenceError(SfplayError):
    """An iterative solver ran out of iterations."""

    def __init__(self, message, last_iterate=None, residual=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.residual = residual


class InsufficientSamplesError(SfplayError):
    """Not enough samples to form a statistic."""


class ExperimentError(SfplayError):
    """Too many runs of a Monte-Carlo batch failed."""
