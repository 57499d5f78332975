"""Exception hierarchy shared by every module of the package."""


class GHarnackError(Exception):
    """Base class for all package errors."""


class OutOfBand(GHarnackError, ValueError):
    """A volatility control takes a value outside [sigma_lower, sigma_upper]."""


class MissingStateSource(GHarnackError):
    """A feedback policy was sampled without a co-simulated state."""


class ParseError(GHarnackError, ValueError):
    def __init__(self, message, position):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class EvalError(GHarnackError, ArithmeticError):
    """A drift expression is singular or non-finite somewhere it is evaluated."""


class NonFinite(GHarnackError, FloatingPointError):
    """A simulated or computed state became inf/nan."""


class AssumptionViolation(GHarnackError, ValueError):
    """Model assumptions (QM != 0, Lipschitz bound, step-size guard) fail."""


class CFLViolation(GHarnackError, ValueError):
    pass


class OutOfDomain(GHarnackError, ValueError):
    pass


class DegenerateCoupling(GHarnackError, ValueError):
    """The coupling Gram integral vanishes, so the schedule cannot be built."""


class OverflowDetected(GHarnackError, OverflowError):
    """An exponential-moment exponent exceeded the overflow guard."""

    def __init__(self, message, max_exponent=None):
        super().__init__(message)
        self.max_exponent = max_exponent


class InvalidF(GHarnackError, ValueError):
    pass


class QuadratureDivergence(GHarnackError, ArithmeticError):
    pass


class ConfigError(GHarnackError, ValueError):
    pass
