"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ``DataError`` -> 2, ``NumericalError`` -> 3.
"""


class PairgenError(Exception):
    pass


class DataError(PairgenError, ValueError):
    """Input data is malformed or degenerate."""


class DegenerateInputError(DataError):
    pass


class FormatError(DataError):
    pass


class MalformedHeaderError(FormatError):
    pass


class DimensionOverflowError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class NumericalError(PairgenError, RuntimeError):
    """An iterative or estimation procedure failed to produce a result."""


class SamplingExhaustedError(NumericalError):
    def __init__(self, message, pose=None, overlap=None):
        super().__init__(message)
        self.pose = pose
        self.overlap = overlap


class RegistrationError(NumericalError):
    pass


class CorrectionError(NumericalError):
    pass
