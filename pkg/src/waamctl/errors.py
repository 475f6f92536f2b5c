"""Exception types shared across the toolkit."""


class ToolkitError(Exception):
    """Base class for all toolkit errors."""


class InvalidArgumentError(ToolkitError, ValueError):
    """An argument violates a documented precondition."""


class DataFormatError(ToolkitError):
    """A config or data file is malformed or uses an unknown schema."""


class NumericFaultError(ToolkitError):
    """A numeric computation produced non-finite values."""


class DegenerateModelError(ToolkitError):
    """A fit or inversion is rank-deficient or singular."""


class TrainingDivergedError(NumericFaultError):
    """Training loss became non-finite; carries the history collected so far."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []
