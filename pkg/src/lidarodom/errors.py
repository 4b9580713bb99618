"""Exception types shared across the package."""


class OdomError(Exception):
    """Base class for all lidarodom errors."""


class InvalidArgumentError(OdomError, ValueError):
    pass


class DegenerateOrientationError(OdomError, ValueError):
    """Rotation is at or too close to gimbal lock for the Euler convention."""


class EmptyFrameError(OdomError, ValueError):
    pass


class EncodingInvariantError(OdomError, RuntimeError):
    pass


class ShapeError(OdomError, ValueError):
    pass


class UsageError(OdomError, RuntimeError):
    pass


class IncompatibleWeightsError(OdomError, ValueError):
    pass


class DataError(OdomError, ValueError):
    """Malformed or inconsistent input data (scan files, pose files, configs)."""


class DivergenceError(OdomError, FloatingPointError):
    pass
