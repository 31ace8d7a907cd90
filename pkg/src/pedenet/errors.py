"""Exception types raised across the package."""


class PedenetError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(PedenetError, ValueError):
    pass


class SingularMatrixError(PedenetError, ArithmeticError):
    """A covariance stayed non positive definite after all jitter attempts."""

    def __init__(self, component: int, jitter: float):
        self.component = component
        self.jitter = jitter
        super().__init__(f"covariance of component {component} is not positive definite (last jitter {jitter:g})")


class PreconditionError(PedenetError, RuntimeError):
    pass


class DatasetNotFoundError(PedenetError, FileNotFoundError):
    pass


class CorruptDatasetError(PedenetError):
    pass


class IncompatibleCheckpointError(PedenetError):
    pass


class UndefinedMetricError(PedenetError, ValueError):
    pass
