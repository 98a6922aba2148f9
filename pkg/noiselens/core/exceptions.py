"""Exception types raised across noiselens.

Every error derives from ``NoiselensError``, itself a ``ValueError``, so callers that
only care about "bad input" can keep catching ``ValueError``.
"""


class NoiselensError(ValueError):
    """Base class for all noiselens errors."""


class ShapeError(NoiselensError):
    """Tensor shapes are incompatible with the requested operation."""


class DomainError(NoiselensError):
    """A value lies outside the domain of an operation (e.g. log of a non-positive number)."""


class TapeError(NoiselensError):
    """Backward was requested for a tensor that the tape cannot differentiate."""


class MissingGradientError(NoiselensError):
    """An optimizer step was requested for a parameter without a gradient."""


class ConfigError(NoiselensError):
    """A configuration file or object is invalid."""


class InvalidAnnotationError(NoiselensError):
    """An annotation box falls outside the unit square or is degenerate."""


class DataLeakError(NoiselensError):
    """A validation split was handed to a training entry point."""


class ImageFormatError(NoiselensError):
    """An image file is unreadable or not a 16-bit grayscale PNG."""


class CheckpointError(NoiselensError):
    """Base class for checkpoint problems."""


class CorruptCheckpointError(CheckpointError):
    """The checkpoint file is truncated or its header cannot be parsed."""


class CheckpointVersionError(CheckpointError):
    """The checkpoint magic string or format version is not recognised."""


class CheckpointShapeError(CheckpointError):
    """A stored parameter does not match the shape the model config expects."""

    def __init__(self, parameter, expected, found):
        self.parameter = parameter
        self.expected = tuple(expected)
        self.found = tuple(found)
        super().__init__(
            f"Parameter '{parameter}' has shape {self.found} in checkpoint, "
            f"model expects {self.expected}"
        )
