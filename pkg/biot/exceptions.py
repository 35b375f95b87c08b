"""Domain errors raised by the inference library."""


class BiotError(Exception):
    """Base class of every error raised by the `biot` app."""


class NonFiniteError(BiotError):
    """A NaN or infinite value reached a computation that forbids it."""


class DomainError(BiotError, ValueError):
    """A coordinate lies outside the PDE domain [0, T] x [a, b]."""


class SingularSystemError(BiotError):
    """The tridiagonal system of a time step cannot be solved reliably."""


class PriorRepairError(BiotError):
    """A covariance matrix could not be made positive-definite."""


class TrainingDivergedError(BiotError):
    """The training loss (or the MAP objective) became non-finite."""


class StageError(BiotError):
    """A pipeline stage failed.

    Arguments:
        stage   the name of the failed pipeline stage
        cause   the original exception

    """

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super(StageError, self).__init__('Stage "%s" failed: %r' % (stage, cause))


class IndefiniteHessianError(BiotError):
    """The negated Hessian at a supposed mode is not positive-definite."""
