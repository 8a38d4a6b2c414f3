"""Exception types shared across the library."""


class DimensionError(ValueError):
    """Shapes of inputs do not match what an operation requires."""


class FormatError(ValueError):
    """A file is not in a supported format or its header is corrupt."""


class DomainError(ValueError):
    """A numeric argument is outside the valid domain (negative weight, ...)."""


class DivergenceError(RuntimeError):
    """An iterative solver produced NaN/Inf iterates."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class StepError(RuntimeError):
    """An IRLS step failed; carries the inner solve report when available."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class MajorizerViolationError(RuntimeError):
    """The objective increased beyond slack; indicates a bug, never expected."""


class NonConvergenceError(RuntimeError):
    """A result that requires a converged input was given a non-converged one."""
