"""Exception hierarchy shared across the toolkit."""


class SplatEditError(Exception):
    """Base class for all toolkit errors."""


class InvalidParameterError(SplatEditError, ValueError):
    """An argument violates a documented precondition."""


class PlyFormatError(SplatEditError):
    """A PLY file is structurally unusable (missing property, bad header)."""


class SceneValidationError(SplatEditError):
    """Scene data is structurally valid but contains bad values (NaN, etc.)."""


class DegenerateInputError(SplatEditError):
    """Input is valid in shape but carries no usable signal (empty mask, ...)."""


class GuidanceUnavailableError(SplatEditError):
    """A diffusion-prior query failed and could not be retried."""


class DivergenceError(SplatEditError):
    """An optimization loop produced a non-finite loss."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state or {}
