"""Exception types shared across the package."""


class Pix2MapError(Exception):
    """Base class for all errors raised by this package."""


class StructuralError(Pix2MapError, ValueError):
    """Inputs have the wrong shape, size or reference invalid indices."""


class DomainError(Pix2MapError, ValueError):
    """Inputs are well formed but outside the domain of the operation."""


class CapacityError(Pix2MapError, ValueError):
    """A graph exceeds a configured fixed capacity (e.g. max node count)."""


class GraphFormatError(Pix2MapError, ValueError):
    """A file could not be parsed under the expected schema."""


class TrainingError(Pix2MapError, RuntimeError):
    """Optimization diverged (non-finite loss)."""

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
