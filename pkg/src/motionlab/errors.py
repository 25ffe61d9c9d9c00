"""Exception types shared across motionlab."""


class MotionLabError(Exception):
    pass


class ShapeError(MotionLabError, ValueError):
    pass


class SizeError(ShapeError):
    """Input too small for the requested operation."""


class ArityError(MotionLabError, ValueError):
    pass


class DomainError(MotionLabError, ValueError):
    pass


class RangeError(MotionLabError, ValueError):
    pass


class StateError(MotionLabError, RuntimeError):
    pass


class FormatError(MotionLabError, ValueError):
    pass


class TruncationError(FormatError):
    pass


class ConfigError(MotionLabError, ValueError):
    pass
