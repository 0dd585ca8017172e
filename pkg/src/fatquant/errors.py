"""Exception types raised across the toolkit."""


class FatQuantError(Exception):
    """Base class for all toolkit errors."""


class ShapeMismatch(FatQuantError):
    pass


class UnsupportedKind(FatQuantError):
    pass


class EmptyTensor(FatQuantError):
    pass


class NonFiniteInput(FatQuantError):
    pass


class NonFiniteGradient(FatQuantError):
    pass


class ParseError(FatQuantError):
    pass


class BlobSizeMismatch(FatQuantError):
    pass


class DanglingRef(FatQuantError):
    pass


class CyclicGraph(FatQuantError):
    pass


class BadMagic(FatQuantError):
    pass


class Truncated(FatQuantError):
    pass


class KTooLarge(FatQuantError):
    pass


class OrphanBatchNorm(FatQuantError):
    pass


class NoPatternFound(FatQuantError):
    pass


class NonPositiveScale(FatQuantError):
    pass


class EmptyCalibration(FatQuantError):
    pass


class MissingSiteParams(FatQuantError):
    pass


class AccumulatorOverflow(FatQuantError):
    pass


class BadVersion(FatQuantError):
    pass


class Corrupt(FatQuantError):
    pass


class MissingPrerequisite(FatQuantError):
    pass
