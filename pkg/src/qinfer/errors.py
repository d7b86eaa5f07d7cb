"""Exception types raised across the engine.

Every failure a caller can trigger with bad input maps to one of these, so
the CLI can translate them into stable exit codes.
"""


class EngineError(Exception):
    """Base class for all engine errors."""


class InvalidInput(EngineError, ValueError):
    """Input values are unusable (non-finite, too short, out of range)."""


class InvalidConfig(EngineError, ValueError):
    """A configuration object violates its invariants."""


class ShapeError(EngineError, ValueError):
    """Tensor dimensions do not agree."""


class CapacityExceeded(EngineError):
    """A pre-allocated KV cache has no free slot left."""


class FormatError(EngineError, ValueError):
    """Serialized or packed data is malformed."""


class BadMagic(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


class ChecksumMismatch(FormatError):
    pass


class NoRecipeMet(UserWarning):
    """No candidate recipe reached the accuracy target; a best-effort result was returned."""
