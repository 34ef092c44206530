"""Exception types shared across the package."""


class DecoreError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(DecoreError, ValueError):
    """An operand has the wrong shape.

    ``dim`` names the offending dimension, e.g. ``"in_channels"``.
    """

    def __init__(self, message, dim=None, expected=None, got=None):
        super().__init__(message)
        self.dim = dim
        self.expected = expected
        self.got = got


class GraphError(DecoreError, ValueError):
    """A graph description violates a structural invariant."""


class StaleCacheError(DecoreError, RuntimeError):
    """A forward cache no longer matches the parameters it was built from."""


class ConstraintError(DecoreError, ValueError):
    """A resource budget cannot be met even at the one-channel floor."""

    def __init__(self, message, floor=None):
        super().__init__(message)
        self.floor = floor


class CheckpointError(DecoreError, ValueError):
    """A checkpoint file is corrupt or has an unsupported version."""

    def __init__(self, message, found=None, supported=None):
        super().__init__(message)
        self.found = found
        self.supported = supported


class IdxFormatError(DecoreError, ValueError):
    """Malformed IDX file. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        super().__init__(f"{message} (at byte offset {offset})" if offset is not None else message)
        self.offset = offset
