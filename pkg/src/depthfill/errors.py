"""Exception taxonomy shared across the package.

Every failure mode maps onto one of four categories so the CLI can turn
them into stable exit codes: usage (1), data/format (2), numeric (3).
"""


class DepthfillError(Exception):
    """Base class for all package-specific errors."""


class UsageError(DepthfillError):
    """API misuse: bad argument combinations, backward on non-scalars, etc."""


class ConfigError(UsageError):
    """Invalid configuration value (bad channel counts, odd dims, ...)."""


class DimensionError(UsageError):
    """Shape mismatch between tensors or against an op's contract."""


class DataError(DepthfillError):
    """Broken dataset artifacts: manifests, missing files, dim mismatches."""


class FormatError(DataError):
    """Malformed serialized payloads (PNG bit depth, checkpoint headers)."""


class NumericError(DepthfillError):
    """Non-finite values or numerically invalid inputs (e.g. depth <= 0)."""
