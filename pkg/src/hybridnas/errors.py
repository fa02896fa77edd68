"""Exception types shared across the package."""


class HybridNASError(Exception):
    """Base class for all package errors."""


class ValidationError(HybridNASError, ValueError):
    """Bad user-facing input: labels out of range, malformed files, bad flags."""


class ConfigurationError(ValidationError):
    """Structurally invalid configuration, raised at build time."""


class DimensionError(ValidationError):
    """Tensor shapes that cannot be combined."""


class TrainingError(HybridNASError, RuntimeError):
    """A training run had to abort (non-finite loss, missing gradient)."""
