"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: configuration and data problems are
user errors (exit 2), a non-finite value during training aborts with exit 3,
anything else is an internal failure (exit 1).
"""


class SegGanError(Exception):
    """Base class for every package-specific error."""


class ConfigurationError(SegGanError):
    """Invalid configuration value, shape mismatch, or bad user input."""


class DegenerateBatchError(ConfigurationError):
    """Batch statistics requested over a single element per channel."""


class DataError(SegGanError):
    """Problem with dataset files or their contents."""


class SizeMismatchError(DataError):
    """An image and its label map have different sizes."""


class LabelValueError(DataError):
    """A label map contains a value outside [0, num_classes) that is not the ignore value."""


class FileReadError(DataError):
    """A dataset file is missing or cannot be decoded."""


class CheckpointError(SegGanError):
    """A checkpoint file is missing, truncated, or has a bad signature."""


class NumericsError(SegGanError):
    """A non-finite value appeared in a tensor during training."""
