"""Exception types shared across the package."""


class CsvSchemaError(ValueError):
    """CSV header or cell layout does not match ``t,u1..,y1..``."""


class GridError(ValueError):
    """Timestamps are not a uniform grid within tolerance."""


class DataError(ValueError):
    """Non-finite or structurally invalid data values."""


class TooShortError(ValueError):
    """Not enough samples for the requested operation."""


class DivergenceError(RuntimeError):
    """A state trajectory left the finite range during integration or rollout."""


class NonConvergenceError(RuntimeError):
    """Adaptive stepping hit its step budget or minimum step size.

    Carries the last time reached in ``last_t``.
    """

    def __init__(self, msg, last_t=None):
        super().__init__(msg)
        self.last_t = last_t


class NonFiniteGradientError(RuntimeError):
    """An optimizer step was rejected because a gradient was not finite."""


class TrainingDivergedError(RuntimeError):
    """A training loss became non-finite; ``epoch`` records where."""

    def __init__(self, msg, epoch=None):
        super().__init__(msg)
        self.epoch = epoch
