"""Exception types shared across the package."""


class RamanMixError(Exception):
    """Base class for all package-specific errors."""


class NonFiniteError(RamanMixError):
    """Integration produced NaN/Inf states (usually a sign of bad parameters)."""


class PeakOutOfRangeError(RamanMixError, ValueError):
    """A peak center lies outside the wavenumber grid."""


class RankDeficientError(RamanMixError):
    """A label matrix does not have full column rank under the active tolerance."""


class DimensionMismatchError(RamanMixError, ValueError):
    """Array shapes are inconsistent with the operation's contract."""


class FixtureMissingError(RamanMixError, FileNotFoundError):
    """A required fixture file could not be found or parsed."""


class ZeroRangeError(RamanMixError, ValueError):
    """A label column needed for scaling is identically zero."""


class NormalizationMismatchError(RamanMixError):
    """Datasets/models were scaled with different normalization records."""


class DivergedError(RamanMixError):
    """Training loss became non-finite (learning rate too high)."""
