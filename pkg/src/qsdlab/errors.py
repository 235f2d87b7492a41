"""Exception hierarchy. Every error carries a stable machine-readable ``code``."""


class QsdError(Exception):
    code = "QsdError"


# model
class NegativeRate(QsdError):
    code = "NegativeRate"


class DuplicateEntry(QsdError):
    code = "DuplicateEntry"


class NotIrreducible(QsdError):
    code = "NotIrreducible"


class SelfLoop(QsdError):
    code = "SelfLoop"


class BadParameters(QsdError):
    code = "BadParameters"


class TruncationBreaksIrreducibility(NotIrreducible):
    code = "TruncationBreaksIrreducibility"


# spectral / taboo / qsd
class ShiftAtOrAboveMinRate(QsdError):
    code = "ShiftAtOrAboveMinRate"


class NoConvergence(QsdError):
    code = "NoConvergence"


class BoundaryDecay(QsdError):
    code = "BoundaryDecay"


class SeriesNotResolved(QsdError):
    code = "SeriesNotResolved"


class KernelNotStochasticEnough(QsdError):
    code = "KernelNotStochasticEnough"

    def __init__(self, message, row_sums=None):
        super().__init__(message)
        self.row_sums = row_sums


class NotRecurrent(QsdError):
    code = "NotRecurrent"


class EmptyExitSet(QsdError):
    code = "EmptyExitSet"


class NonPositiveEigenvector(QsdError):
    code = "NonPositiveEigenvector"


# htransform
class DegenerateH(QsdError):
    code = "DegenerateH"


class BoundaryShift(QsdError):
    code = "BoundaryShift"


# simulate
class TooFewSurvivors(QsdError):
    code = "TooFewSurvivors"


# io
class ParseError(QsdError):
    code = "ParseError"

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class UnsupportedFormat(QsdError):
    code = "UnsupportedFormat"


class IoError(QsdError):
    code = "IoError"
