"""Exception hierarchy shared across the package.

``ValidationError`` covers bad arguments, shapes, and configuration; the CLI
maps it to exit code 2. Everything else derived from ``AndiError`` maps to
exit code 3 (runtime or correctness failure).
"""


class AndiError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(AndiError, ValueError):
    """Invalid argument, shape, or configuration."""


class FormatError(AndiError):
    """Malformed tensor container or manifest file."""


class NormalizationError(AndiError):
    """Intensity normalization could not be performed (names the channel)."""


class NoiseGenerationError(AndiError):
    """A noise sample could not be produced (e.g. zero empirical spread)."""


class TrainingError(AndiError):
    """Training diverged or produced non-finite values."""


class DegenerateInputError(AndiError):
    """Input has no usable dynamic range (e.g. constant map to threshold)."""


class PlacementError(AndiError):
    """Synthetic lesion placement failed after the retry budget."""


class CorrectnessError(AndiError):
    """A runtime self-check failed (e.g. outputs diverge across threads)."""
