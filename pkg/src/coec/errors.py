"""Exception hierarchy shared by every module."""


class CoecError(Exception):
    """Base class for all calibration-pipeline errors."""


class InvalidParameterError(CoecError, ValueError):
    pass


class PreconditionError(CoecError, ValueError):
    pass


class InvalidDistributionError(CoecError, ValueError):
    pass


class EmptyOverlapError(CoecError):
    """No LiDAR point landed on a valid depth pixel."""


class OptimizationAbortedError(CoecError):
    pass


class NoSeparatingThresholdError(CoecError):
    pass


class LoadError(CoecError):
    def __init__(self, message, path=None):
        super().__init__(message if path is None else f"{message}: {path}")
        self.path = path


class FormatError(LoadError):
    pass


class DimensionError(LoadError):
    pass
