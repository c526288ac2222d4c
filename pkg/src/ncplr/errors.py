"""Exception types shared across the package."""


class NcplrError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(NcplrError):
    """Invalid configuration value or combination (e.g. kappa > N, P > K)."""


class FormatError(NcplrError):
    """Malformed file content; message names the byte offset where known."""


class UsageError(NcplrError):
    """API called outside its contract (bad index, shape mismatch, ...)."""


class StalenessError(NcplrError):
    """Cluster count K of one structure no longer matches the current epoch."""


class NumericError(NcplrError):
    """Non-finite intermediate or a vector that cannot be normalized."""
