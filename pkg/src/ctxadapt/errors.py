"""Exception classes.

Every error raised on purpose by the library derives from :class:`AdaptError`,
so the CLI can report a single machine-parseable class name.
"""


class AdaptError(Exception):
    """Base class for all library errors."""


class ShapeError(AdaptError, ValueError):
    pass


class StateError(AdaptError, RuntimeError):
    pass


class EmptyBatchError(AdaptError, ValueError):
    pass


class ParameterError(AdaptError, ValueError):
    pass


class LabelRangeError(AdaptError, IndexError):
    pass


class EmptyInputError(AdaptError, ValueError):
    pass


class AdaptationImpossibleError(AdaptError):
    """Raised when pseudo-label filtering leaves nothing to train on."""


class DivergenceError(AdaptError, FloatingPointError):
    """Training produced a non-finite loss.

    ``params`` holds the last parameters that produced finite losses for a
    whole epoch, so callers can still checkpoint them.
    """

    def __init__(self, message, params=None, epoch=None):
        super().__init__(message)
        self.params = params
        self.epoch = epoch


class FormatError(AdaptError, ValueError):
    """A binary file failed validation.

    ``offset`` is the byte offset where the problem was detected, or ``None``
    when the problem is not tied to a position.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class PrototypeNormError(FormatError):
    def __init__(self, message, row, offset=None):
        super().__init__(message, offset)
        self.row = row


class GenerationError(AdaptError):
    pass


class SplitError(AdaptError, ValueError):
    pass


class ConfigError(AdaptError, ValueError):
    """Contradictory or missing command-line / config-file settings."""
