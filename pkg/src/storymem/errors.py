"""Exception types shared across the package.

Everything user-visible derives from ``StorymemError`` so callers can catch
one base class; the finer-grained subclasses keep validation failures
(bad shapes, bad configs, bad files) distinguishable from runtime blowups.
"""


class StorymemError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(StorymemError, ValueError):
    """Operand dimensions do not line up."""


class ParameterError(StorymemError, ValueError):
    """An operation was called with an invalid parameter (stride, rank, ...)."""


class UsageError(StorymemError, ValueError):
    """An API was used outside its contract (e.g. non-scalar backward seed)."""


class ConfigError(StorymemError, ValueError):
    """A model / training / experiment configuration failed validation."""


class EmptySentenceError(StorymemError, ValueError):
    """A sentence with zero tokens reached the position encoder."""


class DataFormatError(StorymemError, ValueError):
    """A data file is malformed; the message carries byte offset or line number."""

    def __init__(self, message, *, offset=None, line=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        if line is not None:
            message = f"{message} (at line {line})"
        super().__init__(message)
        self.offset = offset
        self.line = line


class NonFiniteError(StorymemError, ArithmeticError):
    """A NaN or Inf appeared where only finite values are valid."""


class TrainingDiverged(NonFiniteError):
    """The training loss went non-finite; carries the epoch and batch index."""

    def __init__(self, epoch, batch):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class GradCheckError(StorymemError, RuntimeError):
    """A gradient check could not be evaluated; carries the coordinate index."""

    def __init__(self, message, *, coordinate=None):
        if coordinate is not None:
            message = f"{message} (coordinate {coordinate})"
        super().__init__(message)
        self.coordinate = coordinate
