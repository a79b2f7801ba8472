"""Exception types shared across the package."""


class MalformedParamsError(ValueError):
    """Parameter container violates a shape or length contract."""


class InvalidDataError(ValueError):
    """Observed data violates a model precondition (e.g. non-binary labels)."""


class EstimatorError(RuntimeError):
    """A log-density evaluated non-finite inside an estimator.

    Carries enough context to locate the offending term.
    """

    def __init__(self, message: str, branch: int | None = None):
        super().__init__(message)
        self.branch = branch


class NonFiniteGradientError(RuntimeError):
    """Optimizer step rejected because the gradient contained NaN/Inf."""
