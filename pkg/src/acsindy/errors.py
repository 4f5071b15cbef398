"""Exception types shared across the package.

The CLI maps these onto exit codes: argument/config errors -> 2,
numeric/divergence errors -> 3, I/O errors -> 4.
"""


class ACSindyError(Exception):
    """Base class for all package errors."""


class ArgumentError(ACSindyError, ValueError):
    """Invalid argument: bad shape, dimension mismatch, out-of-range value."""


class StateError(ACSindyError, RuntimeError):
    """Operation not valid in the object's current state."""


class NumericError(ACSindyError, ArithmeticError):
    """A non-finite value appeared in a computation."""


class DivergenceError(NumericError):
    """A simulated or rolled-out state became non-finite.

    ``step`` is the integration/rollout step index at which it happened and
    ``sample`` (when known) the batch row.
    """

    def __init__(self, message, step=None, sample=None):
        super().__init__(message)
        self.step = step
        self.sample = sample


class TrainingError(NumericError):
    """Training diverged; ``checkpoint`` holds the last good model (or None)."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
