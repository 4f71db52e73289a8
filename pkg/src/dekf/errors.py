"""Exception hierarchy.

Everything raised deliberately by the library derives from :class:`DEKFError`.
Numerical failures additionally derive from :class:`NumericalError` so the
command line can map them to a single exit status.
"""


class DEKFError(Exception):
    """Base class for all library errors."""


class ConfigError(DEKFError, ValueError):
    """Invalid experiment configuration; the message names the field."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class NumericalError(DEKFError, ArithmeticError):
    pass


class NonPositiveDefinite(NumericalError):
    pass


class SingularInnovation(NumericalError):
    pass


class LineSearchFailed(NumericalError):
    pass


class ObservationOverflow(NumericalError, OverflowError):
    pass


class IncompatibleLink(DEKFError, ValueError):
    pass


class InvalidObservation(DEKFError, ValueError):
    pass


class DimensionMismatch(DEKFError, ValueError):
    pass


class DuplicateMode(DEKFError, ValueError):
    pass


class OrderUnsupported(DEKFError, ValueError):
    pass


class TimeTravel(DEKFError, ValueError):
    pass


class MissingGroundTruth(DEKFError, ValueError):
    pass


class IoError(DEKFError, OSError):
    """Unreadable or malformed input file."""


class SnapshotFormatError(IoError, ValueError):
    pass
