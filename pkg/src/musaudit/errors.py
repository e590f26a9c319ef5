"""Exception hierarchy shared by every stage of the auditing pipeline."""


class AuditError(Exception):
    """Base class for all errors raised by musaudit."""


class DimensionError(AuditError, ValueError):
    """Array shapes are incompatible for the requested operation."""


class ValidationError(AuditError, ValueError):
    """Input data violates a documented invariant."""


class FormatError(AuditError, ValueError):
    """A file does not follow the expected binary/text layout."""


class CorruptionError(FormatError):
    """A file has a valid header but an inconsistent payload."""


class UnsupportedFormatError(FormatError):
    """A well-formed file uses an encoding we do not decode."""


class NumericalError(AuditError, ArithmeticError):
    """Training produced a non-finite value.

    ``diagnostics`` carries whatever context the raiser had (epoch, batch,
    offending parameter, ...) so callers can report it.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
