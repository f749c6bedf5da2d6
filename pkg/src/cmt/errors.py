"""Exception types shared across the package."""


class CMTError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(CMTError, ValueError):
    pass


class NearZeroNorm(CMTError, ValueError):
    pass


class DegenerateBox(CMTError, ValueError):
    pass


class BoxOutsideView(CMTError, ValueError):
    pass


class ConfigInvalid(CMTError, ValueError):
    pass


class EmptyBatch(CMTError, ValueError):
    pass


class QuarantineError(CMTError, PermissionError):
    """Raised when target-domain ground truth is read outside evaluation."""


class TrainingDiverged(CMTError, FloatingPointError):
    pass
