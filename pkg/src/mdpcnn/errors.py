"""Exception types shared across the package."""


class MDPCNNError(Exception):
    """Base class for all package errors."""


class ConfigurationError(MDPCNNError, ValueError):
    """Invalid shapes, sizes or settings supplied when building something."""


class UsageError(MDPCNNError, ValueError):
    """A call made with arguments that violate the operation's contract."""


class DiagnosticError(MDPCNNError, FloatingPointError):
    """Non-finite numbers encountered where finite values are required."""


class LoadError(MDPCNNError, OSError):
    """A file on disk is malformed, truncated or incompatible."""
