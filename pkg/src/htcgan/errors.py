"""Exception types shared across the package."""


class HtcganError(Exception):
    """Base class for package errors."""


class UnsupportedFormatError(HtcganError):
    """File is not a single-file NIfTI-1 image (bad or two-file magic)."""


class UnsupportedDatatypeError(HtcganError):
    """NIfTI datatype other than float32 (16) or int16 (4)."""


class CorruptFileError(HtcganError):
    """Header promises more payload than the file contains."""


class DegenerateVolumeError(HtcganError):
    """Empty brain mask or zero intensity variance inside it."""


class MissingClassError(HtcganError):
    """A label value has no target-distribution entry."""


class ShapeError(HtcganError):
    """Array arguments disagree in shape or violate the declared patch size."""


class TrainingDivergedError(HtcganError):
    """Loss went non-finite; a diagnostics checkpoint was written if possible."""
