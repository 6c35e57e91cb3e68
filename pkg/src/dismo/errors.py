"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """An invalid configuration value; the message names the offending field."""


class NotFoundError(KeyError):
    """A requested record (clip id, label key, ...) does not exist."""


class CorruptDatasetError(RuntimeError):
    """A manifest references files that are missing or unreadable."""


class DegenerateDataError(ValueError):
    """Estimator input is degenerate (e.g. duplicate distances everywhere)."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss; a diagnostic dump was written."""


class CliValidationError(ValueError):
    """CLI argument or config validation failure (exit code 1)."""
