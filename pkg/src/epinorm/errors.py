"""Exception hierarchy shared by every module."""


class EpinormError(Exception):
    """Base class for all library errors."""


class DegenerateSample(EpinormError):
    """Design matrix has rank below 8 (duplicate or coplanar-like configuration)."""


class ZeroMatrix(EpinormError):
    pass


class SingularTransform(EpinormError):
    pass


class EpipoleAtPoint(EpinormError):
    """A correspondence sits on an epipole, so its epipolar line is undefined."""


class CoincidentPoints(EpinormError):
    pass


class RankDeficient(EpinormError):
    pass


class LengthMismatch(EpinormError):
    pass


class IllConditionedGradient(EpinormError):
    """Singular value gap too small for the analytic SVD derivative."""


class EvalFailed(EpinormError):
    pass


class TooFewPoints(EpinormError):
    pass


class NoConsensus(EpinormError):
    pass


class ZeroBaseline(EpinormError):
    pass


class FrustumEmpty(EpinormError):
    pass


class EmptyAfterPrefilter(EpinormError):
    pass


class NonFiniteLoss(EpinormError):
    pass


class WeightsFormatError(EpinormError):
    pass


class BadMagic(WeightsFormatError):
    pass


class VersionMismatch(WeightsFormatError):
    pass


class ShapeMismatch(WeightsFormatError):
    pass


class CorrFileError(EpinormError):
    pass


class CsvVersionError(EpinormError):
    """CSV report written by an unknown schema version."""
