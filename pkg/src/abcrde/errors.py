"""Exception types shared across the package."""


class FitRejectedError(ValueError):
    """A model fit was refused: degenerate input or numerically unusable result.

    ``stage`` names the pipeline stage (e.g. ``"gmm"``, ``"moe"``,
    ``"margin 7"``) so aggregated errors can say where things broke.
    """

    def __init__(self, message, stage=None):
        self.stage = stage
        prefix = f"{stage}: " if stage else ""
        super().__init__(prefix + message)


class NumericalInstabilityError(ArithmeticError):
    """A likelihood evaluation produced a non-finite or untrustworthy value."""


class AggregateFitError(FitRejectedError):
    """Every candidate fit (or every sub-fit of a stage) was rejected."""

    def __init__(self, message, errors, stage=None):
        self.errors = list(errors)
        detail = "; ".join(str(e) for e in self.errors)
        super().__init__(f"{message} [{detail}]", stage=stage)
