"""Black-box membership auditing for text-to-music generators.

Pairs an original track's embedding with the embedding of a generation
conditioned on its caption, and trains a small classifier on shadow
generators to tell member pairs from non-member pairs.
"""

from .errors import (
    AuditError,
    CorruptionError,
    DimensionError,
    FormatError,
    NumericalError,
    UnsupportedFormatError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "AuditError",
    "CorruptionError",
    "DimensionError",
    "FormatError",
    "NumericalError",
    "UnsupportedFormatError",
    "ValidationError",
    "__version__",
]
