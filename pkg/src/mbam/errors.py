"""Exception hierarchy.

The CLI maps these onto exit codes: ``ConfigError`` -> 1,
``NumericalError`` -> 2, ``FormatError``/``OSError`` -> 3.
"""


class MbamError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(MbamError):
    pass


class RateMismatchError(MbamError, ValueError):
    pass


class TooShortError(MbamError, ValueError):
    pass


class ShapeError(MbamError, ValueError):
    pass


class EmptyCorpusError(MbamError, ValueError):
    pass


class LabelError(MbamError, ValueError):
    pass


class TagError(MbamError, ValueError):
    pass


class AlignmentError(MbamError, ValueError):
    pass


class StateError(MbamError, RuntimeError):
    pass


class FreezeError(MbamError, RuntimeError):
    """Raised when an update is attempted on a frozen network."""


class NumericalError(MbamError, ArithmeticError):
    pass


class DivergenceError(NumericalError):
    def __init__(self, message, batch_index=None):
        super().__init__(message)
        self.batch_index = batch_index


class ConsistencyError(NumericalError):
    """Replica parameter vectors disagree at a synchronization barrier."""


class FormatError(MbamError, IOError):
    pass
