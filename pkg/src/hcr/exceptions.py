"""Exception types raised across the package."""


class HCRError(Exception):
    """Base class for all package errors."""


class ZeroVector(HCRError, ValueError):
    """A row could not be projected onto the unit sphere."""


class ShapeMismatch(HCRError, ValueError):
    pass


class ConfigError(HCRError, ValueError):
    pass


class EmptyBatch(HCRError, ValueError):
    pass


class EmptyDataset(HCRError, ValueError):
    pass


class NoNegatives(HCRError, ValueError):
    """Every key in the batch shares one pseudo-label, so no negatives exist."""


class ProportionTooSmall(HCRError, ValueError):
    pass


class DuplicatePoints(HCRError, ValueError):
    pass


class DegenerateData(HCRError, ValueError):
    pass


class EmptyFile(HCRError, ValueError):
    pass


class ParseError(HCRError, ValueError):
    """Malformed CSV input; carries the offending 1-based row and column."""

    def __init__(self, message, row=None, column=None):
        self.row = row
        self.column = column
        location = []
        if row is not None:
            location.append(f"row {row}")
        if column is not None:
            location.append(f"column {column!r}")
        if location:
            message = f"{message} ({', '.join(location)})"
        super().__init__(message)
