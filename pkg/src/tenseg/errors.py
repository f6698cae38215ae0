"""Exception types shared across the engine."""


class TensegError(Exception):
    """Base class for all engine errors."""


class NumericalFault(TensegError):
    """A NaN/Inf appeared in a recorded value or a derivative, or a
    contact denominator collapsed."""


class UsageError(TensegError):
    """API misuse: wrong tape, missing prerequisite, bad arguments."""


class ModelError(TensegError):
    """Physically inconsistent model data (e.g. singular inertia)."""


class FormatError(TensegError):
    """Malformed state vector, trajectory file or checkpoint."""


class DegenerateCable(TensegError):
    """A cable collapsed to (near) zero length or rest length."""


class DivergenceFault(TensegError):
    """Simulation blew up; carries the step index where it happened."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
