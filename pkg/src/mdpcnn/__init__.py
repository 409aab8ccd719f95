"""Multi-view group-pair CNN for view-based 3D object retrieval, on numpy."""

from .errors import ConfigurationError, DiagnosticError, LoadError, MDPCNNError, UsageError

__version__ = "0.1.0"

__all__ = ["ConfigurationError", "DiagnosticError", "LoadError", "MDPCNNError", "UsageError", "__version__"]
