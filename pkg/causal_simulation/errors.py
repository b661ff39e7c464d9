class ValidationError(ValueError):
    """A spec, plan or config violates one of its invariants."""


class DegenerateDesignError(ValueError):
    """A population quantity has a non-positive denominator, e.g. the treatment is fully explained by X."""


class UndefinedRatioError(ZeroDivisionError):
    pass


class SingularDesignError(ValueError):
    pass


class DivergenceError(ArithmeticError):
    pass


class InfeasibleInterventionError(ValueError):
    def __init__(self, message: str, constraint: str) -> None:
        super().__init__(message)
        self.constraint = constraint


class OutputLockedError(RuntimeError):
    """Another run holds the advisory lock on the output directory."""
