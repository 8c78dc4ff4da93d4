"""Exception types shared by the solver modules."""


class FirmExitError(Exception):
    """Base class for all library errors."""


class ParameterError(FirmExitError, ValueError):
    pass


class NonPositiveSigma(ParameterError):
    pass


class NonPositiveRate(ParameterError):
    pass


class NonPositiveGamma(ParameterError):
    pass


class NegativeDemand(FirmExitError, ValueError):
    pass


class InadmissibleParams(FirmExitError, ValueError):
    """r <= sigma^2 + 2 alpha: the expected discounted profit is infinite."""


class TrivialProblem(FirmExitError, ValueError):
    """Effective fixed cost is non-positive, so exiting is never optimal."""


class CapTooSmall(FirmExitError, ValueError):
    pass


class NewtonDiverged(FirmExitError, ArithmeticError):
    pass


class InvariantViolation(FirmExitError, AssertionError):
    pass


class DomainError(FirmExitError, ValueError):
    pass


class OutOfDomain(FirmExitError, ValueError):
    pass


class ThresholdAboveState(FirmExitError, ValueError):
    pass


class IterationLimit(FirmExitError, RuntimeError):
    pass


class InvalidThreshold(FirmExitError, ValueError):
    pass


class InvalidConfig(FirmExitError, ValueError):
    pass


class TrivialReduction(TrivialProblem):
    pass
