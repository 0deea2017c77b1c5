"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An argument has the wrong shape, dimension or range."""


class EvaluationDomainError(ArithmeticError):
    """An M-function evaluation produced a non-finite value."""


class FitFailure(RuntimeError):
    """A local or pooled M-estimation did not produce a usable estimate.

    ``block_ids`` lists the offending blocks when the failure comes from a
    worker inside the simulated federation.
    """

    def __init__(self, message, block_ids=()):
        super().__init__(message)
        self.block_ids = tuple(block_ids)


class AggregationError(RuntimeError):
    """The coordinator could not combine the received summaries."""
