"""Exception hierarchy shared by every module."""


class DESRError(Exception):
    """Base class for all errors raised by desr."""


class ShapeMismatch(DESRError, ValueError):
    pass


class DegenerateRange(DESRError, ValueError):
    pass


class OutOfRange(DESRError, ValueError):
    pass


class NotNormalized(DESRError, ValueError):
    pass


class ChipTooLarge(DESRError, ValueError):
    pass


class CoverageGap(DESRError, ValueError):
    pass


class TooSmall(DESRError, ValueError):
    pass


class ChannelMismatch(DESRError, ValueError):
    pass


class NotSquare(DESRError, ValueError):
    pass


class NoTape(DESRError, RuntimeError):
    pass


class NoDELayer(DESRError, ValueError):
    pass


class EmptyDataset(DESRError, ValueError):
    pass


class DivergedLoss(DESRError, FloatingPointError):
    pass


class FormatError(DESRError, ValueError):
    """A file does not follow the expected binary layout."""


class ConfigError(DESRError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
