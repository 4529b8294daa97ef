"""Exception hierarchy shared across depthscope."""


class DepthscopeError(Exception):
    """Base class for all errors raised by depthscope."""


class InputError(DepthscopeError, ValueError):
    """Invalid argument, token id, index, or corpus content."""


class ShapeError(InputError):
    """Tensor shapes are incompatible."""


class FormatError(DepthscopeError, ValueError):
    """A tensor container file is malformed, truncated, or inconsistent."""

    def __init__(self, message, tensor=None):
        super().__init__(message)
        self.tensor = tensor


class TapeLookupError(DepthscopeError, LookupError):
    """A node was not recorded on the tape being differentiated."""
