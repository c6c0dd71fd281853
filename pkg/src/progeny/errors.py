"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class ModelError(ValueError):
    """Malformed model or graph file (bad shapes, negative masses, unparsable JSON fields)."""


class PreconditionError(ValueError):
    """A documented precondition of an operation does not hold (boundary rho, oracle budget...)."""


class NumericAbort(ArithmeticError):
    """Base class for numeric failures that abort a computation."""


class UnderflowAbort(NumericAbort):
    pass


class SolverDivergence(NumericAbort):
    """The supremum is not attained: the iterate ran off to infinity."""


class ConvergenceError(NumericAbort):
    pass


class NoDataError(LookupError):
    """An estimator window contained no records."""
