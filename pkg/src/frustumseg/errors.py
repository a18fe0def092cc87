"""Exception hierarchy shared across the toolkit.

CLI exit codes map onto these classes: usage errors exit 1, format/data
errors exit 2, numeric failures exit 3.
"""


class FrustumSegError(Exception):
    """Base class for all toolkit errors."""


class FormatError(FrustumSegError):
    """A file does not conform to its binary or text layout."""


class DataError(FrustumSegError):
    """Well-formed input carries values that violate a contract."""


class ProjectionError(DataError):
    """A point cannot be projected (zero depth)."""


class NumericError(FrustumSegError):
    """Non-finite loss, failed gradient check, or similar numeric failure."""
