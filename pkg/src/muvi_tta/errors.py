"""Exception types shared across the package."""


class MuviError(Exception):
    """Base class for all package errors."""


class ConfigError(MuviError, ValueError):
    pass


class ShapeMismatch(MuviError, ValueError):
    pass


class OutOfBounds(MuviError, IndexError):
    pass


class PatchTooLarge(MuviError, ValueError):
    pass


class CoverageGap(MuviError, ValueError):
    pass


class DomainError(MuviError, ValueError):
    pass


class StateMismatch(MuviError, ValueError):
    pass


class NormUnsupported(MuviError, TypeError):
    """Raised when a strategy needs batch normalization but the model lacks it."""


class EmptyMask(MuviError, ValueError):
    pass


class EmptyInput(MuviError, ValueError):
    pass


class DegenerateEmbeddingWarning(UserWarning):
    """An embedding had (near) zero norm; the cosine term fell back to 1."""
