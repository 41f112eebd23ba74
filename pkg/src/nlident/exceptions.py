"""Exception types shared across the package."""


class SpecError(ValueError):
    """Invalid signal, model or experiment specification."""


class DivergenceError(RuntimeError):
    """A simulated trajectory left its admissible region.

    ``index`` is the sample index at which the violation was detected.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class UnstableModelError(ValueError):
    """A fitted or supplied linear model has poles on or outside the unit circle."""


class RankDeficientError(ValueError):
    """A local least-squares problem does not have full column rank."""


class BudgetExceeded(RuntimeError):
    """The wall-clock budget of a fitting routine ran out."""
