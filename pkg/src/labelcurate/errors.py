"""Exception types raised across the package."""


class LabelCurateError(Exception):
    """Base class for every error raised by labelcurate."""


# grids
class InvalidOrientation(LabelCurateError, ValueError):
    pass


class InvalidInterpolation(LabelCurateError, ValueError):
    pass


class GridMismatch(LabelCurateError, ValueError):
    pass


# metrics
class UndefinedDistance(LabelCurateError, ValueError):
    pass


class UndefinedRatio(LabelCurateError, ValueError):
    pass


class UnknownStructure(LabelCurateError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown structure"


class AdapterError(LabelCurateError, ValueError):
    pass


# qc
class EmptyTrainingSet(LabelCurateError, ValueError):
    pass


# statistics
class SampleTooSmall(LabelCurateError, ValueError):
    pass


class DegenerateSample(LabelCurateError, ValueError):
    pass


# assembly
class IncompletePlan(LabelCurateError, ValueError):
    pass


class MissingSource(LabelCurateError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "missing source"


class DegenerateOccurrence(LabelCurateError, ValueError):
    pass


# postfix
class EmptyCentroid(LabelCurateError, ValueError):
    pass


class InsufficientSlices(LabelCurateError, ValueError):
    pass


# io
class IoError(LabelCurateError, OSError):
    pass


class NotNifti(IoError):
    pass


class UnsupportedDatatype(IoError):
    def __init__(self, code):
        super().__init__(f"unsupported NIfTI datatype code {code}")
        self.code = code


class CorruptFile(IoError):
    pass


class ParseError(LabelCurateError, ValueError):
    pass


class DuplicateCase(ParseError):
    pass
