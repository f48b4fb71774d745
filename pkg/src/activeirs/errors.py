"""Exception types raised across the package."""


class ContractError(ValueError):
    """An input violates a documented precondition (shape, symmetry, sign)."""


class NotPSDError(ContractError):
    """A matrix expected to be positive semidefinite has a negative eigenvalue
    beyond the clamping tolerance."""


class InfeasibleBudgetError(ContractError):
    """The amplification budget admits no non-degenerate reflection setting."""


class DegenerateError(ContractError):
    """The problem has no information-bearing direction (e.g. ``T2 = 0``)."""


class AccuracyError(RuntimeError):
    """A numerical quadrature could not reach the requested accuracy."""


class ConvergenceError(RuntimeError):
    """A fixed-point iteration ran out of iterations.

    The last iterate and its residual are kept so callers can inspect or
    restart from them.
    """

    def __init__(self, message, last_iterate=None, residual=None, iterations=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.residual = residual
        self.iterations = iterations
