"""
Custom error types for hilbertforest
"""


class HilbertForestError(Exception):
    """Base exception for hilbertforest errors."""

    pass


class DatasetFormatError(HilbertForestError):
    """Raised when a dataset, result, graph or index file is malformed."""

    pass


class DimensionMismatchError(HilbertForestError):
    """Raised when vectors, queries, bounds or codes disagree on dimension."""

    pass


class ParameterError(HilbertForestError):
    """Raised when a parameter violates its documented range."""

    pass


class KeyRangeError(HilbertForestError):
    """Raised when a Hilbert key or grid coordinate is out of range."""

    pass


class ShapeMismatchError(HilbertForestError):
    """Raised when results and ground truth cannot be compared."""

    pass
