"""Exception hierarchy shared by every module."""


class BilinearCircuitsError(Exception):
    """Base class for library errors."""


class ArgumentError(BilinearCircuitsError, ValueError):
    """Invalid argument: axis out of range, unknown kind, bad token id."""


class DimensionError(BilinearCircuitsError, ValueError):
    """Extents of two operands do not line up."""


class CapacityError(BilinearCircuitsError):
    """A dense object would exceed its materialization limit."""


class PreconditionError(BilinearCircuitsError):
    """Operation called on an object it does not support (e.g. biased layer in a B-form analysis)."""


class ConsistencyError(BilinearCircuitsError):
    """Inputs that should agree with each other do not."""


class ConvergenceError(BilinearCircuitsError):
    def __init__(self, message: str, iterations: int):
        super().__init__(message)
        self.iterations = iterations


class TrainingError(BilinearCircuitsError):
    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class FormatError(BilinearCircuitsError):
    """Bad magic bytes or malformed header."""


class LengthError(FormatError):
    """Payload shorter or longer than the header promises."""


class VersionError(FormatError):
    """Unknown dtype code or unsupported manifest version."""


class IntegrityError(BilinearCircuitsError):
    """Checkpoint file missing or its hash does not match the manifest."""
