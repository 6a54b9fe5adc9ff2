"""Exception hierarchy. Each family maps onto a CLI exit code."""


class BreakmoveError(Exception):
    exit_code = 1


class UsageError(BreakmoveError, ValueError):
    exit_code = 2


class DataError(BreakmoveError):
    exit_code = 3


class NumericalError(BreakmoveError, ArithmeticError):
    exit_code = 4


# usage / argument errors
class InvalidArgument(UsageError):
    pass


class InvalidClass(UsageError):
    pass


class ShapeMismatch(UsageError):
    pass


class InvalidRung(UsageError):
    pass


# data errors
class MissingFile(DataError, FileNotFoundError):
    pass


class DimMismatch(DataError):
    pass


class BadMagic(DataError):
    pass


class CorruptFile(DataError):
    pass


class NonFiniteValue(DataError):
    pass


class WindowCountMismatch(DataError):
    pass


class SegmentCountMismatch(DataError):
    pass


class BadAnnotation(DataError):
    pass


class UnknownVideoId(DataError, KeyError):
    def __str__(self):
        # KeyError repr-quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class EmptyDataset(DataError):
    pass


class EmptyInput(DataError):
    pass


class SingleClass(DataError):
    pass


class MissingMeta(DataError):
    pass


# numerical failures
class ZeroVector(NumericalError):
    pass


class DivergedLoss(NumericalError):
    pass


class NumericalFailure(NumericalError):
    pass
