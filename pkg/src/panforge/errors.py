"""Exception types shared across the package."""


class PanError(Exception):
    """Base class for every error raised by panforge."""


class ShapeError(PanError, ValueError):
    pass


class ConfigError(PanError, ValueError):
    """Invalid configuration; ``field`` names the offending key when known."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class ContractError(PanError, RuntimeError):
    """A caller violated an operation's precondition."""


class UnusableStateError(PanError, RuntimeError):
    pass


class NumericalError(PanError, FloatingPointError):
    """Non-finite values appeared; ``op`` names the first offending operation."""

    def __init__(self, message, op=None):
        super().__init__(message)
        self.op = op


class CheckpointError(PanError, IOError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class ImageFormatError(PanError, IOError):
    """Unsupported image layout (bit depth, color type, interlace...)."""


class TruncatedImageError(ImageFormatError):
    pass
