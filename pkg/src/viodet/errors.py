"""Exception hierarchy shared by every viodet module."""


class ViodetError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(ViodetError, ValueError):
    """An argument violates a documented precondition."""


class EmptyBoxError(ViodetError, ValueError):
    """A bounding box has no overlap with the image."""


class ScaleDBError(ViodetError, ValueError):
    """Malformed scale database source."""


class UnknownCategoryError(ViodetError, KeyError):
    """A label has no entry in the scale database or category dictionary."""

    def __str__(self):
        return Exception.__str__(self)


class SequencingError(ViodetError, ValueError):
    """Frames arrived out of order."""


class ConfigError(ViodetError, ValueError):
    """Invalid configuration or preset file."""


class SessionFormatError(ViodetError, ValueError):
    """A session, results or map file does not follow its format."""


class MismatchError(ViodetError, ValueError):
    """Detection results and ground truth cover different frames."""
