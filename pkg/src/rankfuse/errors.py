"""Exception hierarchy shared across the toolkit."""


class RankfuseError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(RankfuseError):
    """Invalid configuration value; message names the offending field."""


class UsageError(RankfuseError):
    """API called with inconsistent arguments (shape or arity mismatch)."""


class IngestionError(RankfuseError):
    """On-disk corpus is missing or malformed; message names file and line."""


class TrainingError(RankfuseError):
    """Training step aborted (non-finite loss or gradient)."""
