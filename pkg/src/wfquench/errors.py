"""Exception hierarchy shared by all modules."""


class WFError(Exception):
    """Base class for every error raised by wfquench."""


class NonPositiveRadius(WFError, ValueError):
    pass


class NonPositiveF(WFError, ValueError):
    pass


class NonPositiveLambda(WFError, ValueError):
    pass


class DomainError(WFError):
    """A ghost series was evaluated outside the region where it is positive."""


class StepSizeUnderflow(WFError):
    pass


class HorizonTooShort(WFError):
    pass


class GridOutOfRange(WFError):
    pass


class NoDescentDirection(WFError):
    pass


class StageFailed(WFError):
    """A continuation stage did not converge.

    ``completed`` holds the orbits of the stages that did converge.
    """

    def __init__(self, message, stage=None, r_c=None, best_A=None, completed=()):
        super().__init__(message)
        self.stage = stage
        self.r_c = r_c
        self.best_A = best_A
        self.completed = list(completed)


class LagOutOfSpan(WFError):
    pass


class NoBracket(WFError):
    pass


class DegenerateSystem(WFError, ArithmeticError):
    pass


class NegativeDiscriminant(WFError, ArithmeticError):
    pass


class SingularDenominator(WFError, ArithmeticError):
    pass


class ConfigError(WFError, ValueError):
    pass
