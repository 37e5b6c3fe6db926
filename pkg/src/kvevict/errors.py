"""Exception types shared across the package."""


class KvEvictError(Exception):
    """Base class for all package-specific errors."""


class DimError(KvEvictError):
    """Vector/matrix dimensions do not match the operation's contract."""


class OrderError(KvEvictError):
    """Token positions appended out of time order."""


class ContextError(KvEvictError):
    """Scoring context is missing data the selected policy requires."""


class ConfigError(KvEvictError):
    """Invalid policy or generator configuration."""


class SizeError(KvEvictError):
    """Problem size exceeds an enumeration guard."""


class DomainError(KvEvictError):
    """Input outside the mathematical domain of the operation."""


class BasisError(KvEvictError):
    """Supplied vectors fail the orthonormality check."""


class FullyMaskedError(KvEvictError):
    """A softmax row has no unmasked entries."""


class UndefinedCorrelation(KvEvictError):
    """Rank correlation is undefined (a constant input sequence)."""


class SkippedInstance(KvEvictError):
    """A verifier instance does not satisfy the statement's hypotheses."""


class ParseError(KvEvictError):
    """Malformed trace file. Carries the byte offset of the inconsistency."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SchemaError(KvEvictError):
    """CSV rows do not conform to the named report schema."""
