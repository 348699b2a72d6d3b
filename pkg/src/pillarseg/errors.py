"""Exception hierarchy shared by every pillarseg module.

Format and usage problems derive from :class:`FormatError` (CLI exit code 2),
numeric blow-ups from :class:`NumericError` (exit code 3). I/O failures are
plain :class:`OSError` subclasses (exit code 1).
"""


class PillarSegError(Exception):
    """Base class for all library errors."""


class FormatError(PillarSegError, ValueError):
    """Malformed input data or arguments."""


class NumericError(PillarSegError, ArithmeticError):
    """A computation produced a non-finite value."""


# dataset io
class TruncatedScan(FormatError):
    pass


class NonFiniteValue(FormatError):
    pass


class TruncatedLabels(FormatError):
    pass


class UnknownRawId(FormatError):
    pass


class MalformedPoseLine(FormatError):
    pass


class MissingCalibTr(FormatError):
    pass


class MappingFileError(FormatError):
    pass


class PairMismatch(FormatError):
    """A point cloud and its labels disagree in length."""


# geometry / encoders
class InvalidGridSpec(FormatError):
    pass


class IndexOutOfGrid(PillarSegError, IndexError):
    pass


class NotCropped(FormatError):
    pass


class DuplicateCoord(FormatError):
    pass


class DegenerateRay(PillarSegError, ValueError):
    pass


# tensors / model
class ShapeMismatch(FormatError):
    pass


class OddDimension(ShapeMismatch):
    pass


class NonScalarLoss(ShapeMismatch):
    pass


class TapeConsumed(PillarSegError, RuntimeError):
    pass


class ModeMismatch(FormatError):
    pass


class DivisibilityError(FormatError):
    pass


class CheckpointFormatError(FormatError):
    pass


# training / evaluation
class EmptyDataset(FormatError):
    pass


class DivergedLoss(NumericError):
    pass


class LengthMismatch(FormatError):
    pass


class MissingObservability(FormatError):
    pass


class SgridFormatError(FormatError):
    pass


class ConfigError(FormatError):
    pass


class IoFailure(PillarSegError, OSError):
    pass


class MissingInput(FormatError):
    """A required input file or directory does not exist."""
