"""Exception types shared across the package."""


class MorphAvatarError(Exception):
    """Base class for all package errors."""


class ParameterShapeError(MorphAvatarError, ValueError):
    """Blendshape parameter vector does not match the model's basis dimensions."""


class UnsupportedModelError(MorphAvatarError, ValueError):
    """Model lacks data required by the requested operation (e.g. no UV atlas)."""


class NoVisibleGeometryError(MorphAvatarError, ValueError):
    """No vertex projects in front of the camera."""


class DegenerateTriangleError(MorphAvatarError, ValueError):
    """Triangle has (near-)zero area; no local frame can be built."""


class ConfigError(MorphAvatarError, ValueError):
    """Invalid run or sampler configuration."""


class BlobFormatError(MorphAvatarError, ValueError):
    """Tensor blob or container bytes are corrupt or truncated."""


class ScheduleError(MorphAvatarError, ValueError):
    """Noise schedule violates a precondition (e.g. division by zero signal)."""


class FitDivergenceError(MorphAvatarError, RuntimeError):
    """Optimization produced non-finite loss; carries a diagnostic state dump."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
