"""Exception types raised across the toolkit."""


class AnchorDepthError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(AnchorDepthError, ValueError):
    """Inputs have mismatched or unsupported dimensions."""


class DomainError(AnchorDepthError, ValueError):
    """A value lies outside the domain of an operation (e.g. log of a nonpositive depth)."""


class FormatError(AnchorDepthError, ValueError):
    """A tensor or CSV file is malformed.

    ``offset`` is the byte offset (tensor files) or line number (CSV) at which
    the problem was detected.
    """

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)


class EmptyMaskError(AnchorDepthError, ValueError):
    """A reduction was requested over a mask with no valid pixels."""


class InsufficientAnchorsError(AnchorDepthError, ValueError):
    """Too few anchors for the requested fit or sampling regime."""

    def __init__(self, message, shortfall=None):
        self.shortfall = shortfall
        super().__init__(message)


class RankError(AnchorDepthError, ValueError):
    """A linear system is singular or rank deficient."""


class ConvergenceError(AnchorDepthError, RuntimeError):
    """An iterative routine did not reach its tolerance."""

    def __init__(self, message, residual=None):
        self.residual = residual
        super().__init__(message)


class CapabilityError(AnchorDepthError, ValueError):
    """A method needs an input the scene does not provide (e.g. region labels)."""


class TrainingError(AnchorDepthError, RuntimeError):
    """Training produced a non-finite loss."""
