"""Exception classes shared across the package (mapped to CLI exit codes)."""
from .autodiff import ShapeError
from .sim import DivergenceError, SceneError


class FormatError(ValueError):
    """A dataset or checkpoint file is malformed, truncated or of another version."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(ValueError):
    pass


__all__ = ["ConfigError", "DivergenceError", "FormatError", "SceneError", "ShapeError"]
