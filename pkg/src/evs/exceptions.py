"""Exception hierarchy shared by every evs module."""


class EVSError(Exception):
    """Base class for all errors raised by evs."""


class ValidationError(EVSError, ValueError):
    """A value violates a documented invariant."""


class DimensionMismatchError(ValidationError):
    """Two rasters that must share a shape do not."""


class FrameSequenceError(EVSError):
    """A frame directory cannot be turned into a coherent sequence."""

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


class FormatError(EVSError):
    """A binary container (.flo, probability file) is malformed."""

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


class MissingFrameError(EVSError, KeyError):
    """A backend has no data for the requested frame index."""

    def __str__(self):
        return str(self.args[0]) if self.args else "missing frame"


class PipelineError(EVSError):
    """A backend failed while the pipeline was processing a frame."""

    def __init__(self, message, frame_index):
        super().__init__(f"frame {frame_index}: {message}")
        self.frame_index = frame_index


class SpecError(ValidationError):
    """A scene or run configuration failed validation.

    ``field`` holds the dotted path of the offending entry, e.g.
    ``objects[1].size``.
    """

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class EmptyEvaluationError(EVSError):
    """No class is present in either ground truth or prediction."""
