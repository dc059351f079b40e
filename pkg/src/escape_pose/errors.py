"""Exception hierarchy shared across the package."""


class EscapeError(Exception):
    """Base class for all package errors."""


class InvalidPoseError(EscapeError, ValueError):
    pass


class SchemaError(EscapeError, ValueError):
    pass


class AlignmentDegenerateError(EscapeError):
    """Procrustes alignment had a rank-deficient source spread.

    ``aligned``, ``rotation``, ``scale`` and ``translation`` hold the
    best-effort transform computed before the degeneracy was detected.
    """

    def __init__(self, message, aligned=None, rotation=None, scale=None, translation=None):
        super().__init__(message)
        self.aligned = aligned
        self.rotation = rotation
        self.scale = scale
        self.translation = translation


class BatchTooSmallError(EscapeError, ValueError):
    pass


class SequencingError(EscapeError, RuntimeError):
    pass


class UpdateRejectedError(EscapeError, FloatingPointError):
    pass


class IncompatibleCheckpointError(EscapeError):
    pass


class CorruptCheckpointError(EscapeError):
    pass


class SupervisionUnavailableError(EscapeError):
    pass


class TrainingDivergedError(EscapeError):
    def __init__(self, message, last_good=None, epoch=None):
        super().__init__(message)
        self.last_good = last_good
        self.epoch = epoch


class InsufficientDataError(EscapeError):
    pass


class DataFormatError(EscapeError):
    pass


class DependencyError(EscapeError):
    pass
