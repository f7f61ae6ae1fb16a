"""Exception types raised across the package."""


class MateVitError(Exception):
    """Base class for every error raised by matevit."""


class ShapeError(MateVitError, ValueError):
    pass


class EmptyTargetError(MateVitError, ValueError):
    """Every target pixel carried the ignore label."""


class NumericError(MateVitError, ArithmeticError):
    pass


class ConfigError(MateVitError, ValueError):
    pass


class DatasetError(MateVitError, ValueError):
    pass


class CheckpointError(MateVitError, ValueError):
    pass
