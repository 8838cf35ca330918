"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """An argument violates an operation's precondition."""


class ShapeError(ValueError):
    """Array or mask dimensions do not line up."""


class ConfigError(ValueError):
    """A configuration value is missing, unknown or out of range.

    ``field`` names the dotted config path when one applies.
    """

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class NoCandidatesError(ValueError):
    """Segment selection was asked to choose from an empty set."""


class UnknownLabelError(LookupError):
    """A label was not registered with an oracle encoder."""


class TrainingDiverged(RuntimeError):
    """The training loss became non-finite."""

    def __init__(self, epoch, loss):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss
