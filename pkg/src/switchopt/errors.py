"""Exception types shared across the package."""


class SwitchoptError(Exception):
    """Base class for all package errors."""


class ValidationError(SwitchoptError, ValueError):
    """Bad argument, bad configuration or malformed input file."""


class IntegrationError(SwitchoptError):
    """Forward integration produced a non-finite state."""

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class EvaluationError(SwitchoptError):
    """An objective or constraint callback returned non-finite values."""

    def __init__(self, message, z=None):
        super().__init__(message)
        self.z = z


class SolverError(SwitchoptError):
    """The NLP solver did not converge.

    The offending solution (status, iterate, residuals) is attached so callers
    can inspect it.
    """

    def __init__(self, message, solution=None, log=None):
        super().__init__(message)
        self.solution = solution
        self.log = log


class InfeasibleError(SwitchoptError):
    """Raised when the sequence optimizer exhausts its cost schedule."""

    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log
