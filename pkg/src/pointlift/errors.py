"""Exception types shared across the pipeline."""


class PointliftError(Exception):
    """Base class for all errors raised by this package."""


class PlyError(PointliftError):
    """Malformed, truncated, or otherwise unreadable PLY data."""


class FormatError(PointliftError):
    """Bad magic, version, or payload size in a binary interchange file."""


class ConfigError(PointliftError):
    """Invalid parameter or configuration value."""


class MissingInputError(PointliftError):
    """A pipeline stage was invoked before its upstream outputs exist."""

    def __init__(self, stage: str, path: str, hint: str = ""):
        self.stage = stage
        self.path = path
        msg = f"stage '{stage}' requires missing input: {path}"
        if hint:
            msg += f" ({hint})"
        super().__init__(msg)


class TrainingDiverged(PointliftError):
    """Distillation loss blew past the divergence guard."""
