"""
Error Types

Exception hierarchy shared by every CoopDet module. Each error derives from
CoopDetError and from the builtin that best describes it, so callers can
catch either.
"""

from typing import Optional


class CoopDetError(Exception):
    """Base class for all CoopDet errors."""
    pass


class ValidationError(CoopDetError, ValueError):
    """Invalid configuration or argument value."""
    pass


class GeometryError(CoopDetError, ValueError):
    """Degenerate or inconsistent geometry (zero-area boxes, bad sizes)."""
    pass


class ShapeError(CoopDetError, ValueError):
    """Array or tensor dimensions do not line up."""
    pass


class LossDomainError(CoopDetError, ValueError):
    """Loss function argument outside its open interval."""
    pass


class SceneGenerationError(CoopDetError, RuntimeError):
    """Scene layout could not be generated within the retry budget."""
    pass


class DatasetError(CoopDetError, RuntimeError):
    """Dataset directory is missing files, labels or attention state."""
    pass


class ProtocolError(CoopDetError, ValueError):
    """
    Malformed wire message.

    Attributes:
        offset: Byte offset at which decoding failed
    """

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
