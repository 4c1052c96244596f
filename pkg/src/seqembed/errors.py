"""Exception types shared across the package."""


class SeqEmbedError(Exception):
    """Base class for all package errors."""


class ShapeError(SeqEmbedError, ValueError):
    """Tensor dimensions incompatible with the requested operation."""


class ParameterError(SeqEmbedError, ValueError):
    """Argument outside its documented domain."""


class NumericError(SeqEmbedError, ArithmeticError):
    """Non-finite value or degenerate quantity (e.g. zero norm) encountered."""


class FormatError(SeqEmbedError, ValueError):
    """Malformed file contents (bad magic, truncated payload, ...)."""


class ConsistencyError(SeqEmbedError, ValueError):
    """Two inputs that must agree do not (e.g. image/label counts)."""


class LabelError(SeqEmbedError, ValueError):
    """Label outside the configured label space."""


class ConfigurationError(SeqEmbedError, ValueError):
    """Invalid combination of configuration options."""


class DimensionError(SeqEmbedError, ValueError):
    """Embedding dimensionality unsuitable for the requested operation."""
