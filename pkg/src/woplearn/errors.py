"""Exception taxonomy shared by all modules.

The CLI maps these onto exit codes: usage/invalid-argument errors exit 2,
data errors exit 3, numeric divergence exits 4.
"""


class WoplearnError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(WoplearnError, ValueError):
    """A caller-supplied argument violates a precondition."""


class ShapeError(InvalidArgumentError):
    """Array shapes are inconsistent; message carries both shapes."""


class DataError(WoplearnError):
    """Input data violates a contract (dimensions, polarity, corruption)."""


class ParseError(DataError):
    """A file could not be parsed; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class StateError(WoplearnError, RuntimeError):
    """An operation was invoked in an invalid object state."""


class TrainingDivergedError(WoplearnError):
    """Training produced a non-finite value; records where it happened."""

    def __init__(self, message: str, epoch: int | None = None, step: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


class SelectionError(WoplearnError):
    """Model selection could not pick a model (e.g. every cell diverged)."""
