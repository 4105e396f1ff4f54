"""Exception types shared across the package."""


class RegevalError(Exception):
    """Base class for all regeval-specific errors."""


class NiftiFormatError(RegevalError):
    """File is not a NIfTI-1 volume this reader supports (bad magic, NIfTI-2, ...)."""


class NiftiCorruptionError(RegevalError):
    """Header parsed but the data section is truncated or inconsistent."""


class NonFiniteDataError(RegevalError):
    """Voxel data contains NaN/Inf and the caller did not opt in to zero-filling."""


class LabelIntegrityError(RegevalError):
    """A volume read as a labelmap contains non-integer values."""


class TransformIntegrityError(RegevalError):
    """A displacement field contains non-finite components."""


class GridMismatchError(RegevalError):
    """Two volumes expected on the same grid have different dims or affines."""


class ManifestError(RegevalError):
    """Subject manifest is invalid (duplicate ids, missing files, bad tags)."""


class DegenerateStatisticsError(RegevalError):
    """A statistic is undefined for the given inputs (e.g. zero pooled variance)."""


class OptimizationFailureError(RegevalError):
    """Registration failed to make progress; carries the loss trace."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []
