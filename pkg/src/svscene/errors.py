"""Exception types shared across the engine."""


class EngineError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(EngineError):
    """Bad user input or malformed on-disk data; the CLI maps these to exit code 2."""


class AddressAbsent(ValidationError):
    pass


class MaxLevelReached(ValidationError):
    pass


class TapeMissing(EngineError):
    pass


class ShapeMismatch(ValidationError):
    pass


class EmptyGrid(ValidationError):
    pass


class DegenerateDepth(EngineError):
    """Depth map has (near) zero variance; the correlation loss skips the view."""


class NonFiniteGradient(EngineError):
    pass


class DatasetEmpty(ValidationError):
    pass


class TeacherMismatch(ValidationError):
    pass


class CheckpointIncomplete(ValidationError):
    pass


class EmptyQuerySet(ValidationError):
    pass


class MissingManifest(ValidationError):
    pass


class BadRotation(ValidationError):
    pass


class MixedResolutions(ValidationError):
    pass


class BadTensorFile(ValidationError):
    pass


class BadCheckpoint(ValidationError):
    pass
