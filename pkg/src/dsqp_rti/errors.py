"""Exception types raised across the package."""


class DsqpError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(DsqpError, ValueError):
    pass


class CouplingError(DsqpError, ValueError):
    """Consensus rows are not 2-assigned or E lacks full row rank."""


class EvaluationFailure(DsqpError, FloatingPointError):
    """A model callback returned non-finite values."""


class Infeasible(DsqpError):
    pass


class NotStrictlyConvex(DsqpError):
    pass


class MaxIterations(DsqpError):
    """Iteration budget exhausted; ``best`` holds the last iterate when available."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class SingularKkt(DsqpError, ArithmeticError):
    pass


class SingularEEt(DsqpError, ArithmeticError):
    pass


class MissingMessage(DsqpError, RuntimeError):
    pass


class Diverged(DsqpError, FloatingPointError):
    pass


class InvalidInputs(DsqpError, ValueError):
    pass


class InconclusiveCertificate(DsqpError):
    """A certificate quantity failed its validity condition; ``constant`` names it."""

    def __init__(self, message, constant=None):
        super().__init__(message)
        self.constant = constant


class NoConvergence(DsqpError):
    pass


class NotStabilizing(DsqpError):
    pass


class ConstraintViolation(DsqpError):
    """An applied input left its box beyond tolerance."""


class ConfigError(DsqpError, ValueError):
    pass
