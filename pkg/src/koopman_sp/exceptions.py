"""Exception hierarchy shared by all modules."""


class KoopmanSPError(Exception):
    """Base class for all errors raised by koopman_sp."""


class EvaluationError(KoopmanSPError, ArithmeticError):
    """Vector field evaluated to a non-finite value."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class DomainError(KoopmanSPError, ValueError):
    """Argument outside the domain of the operation."""


class ProjectionError(DomainError):
    """The singular-limit projection is undefined at the point (it lies on W_0)."""


class RangeError(KoopmanSPError, ValueError):
    """Requested computation is outside its numerically valid range."""


class StiffnessError(KoopmanSPError, RuntimeError):
    """Step size underflow or step budget exhausted during integration."""

    def __init__(self, message, t=None, state=None):
        super().__init__(message)
        self.t = t
        self.state = state


class DivergenceError(KoopmanSPError, RuntimeError):
    """Integration produced a non-finite state."""

    def __init__(self, message, t=None, state=None):
        super().__init__(message)
        self.t = t
        self.state = state


class NoEventError(KoopmanSPError, RuntimeError):
    """No section crossing occurred before the time limit."""


class CycleNotFoundError(KoopmanSPError, RuntimeError):
    """Limit cycle search failed."""
