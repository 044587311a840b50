"""Exception hierarchy shared by every cubeseg module.

Each class carries an ``exit_code`` so the command line can map failures to
a category without inspecting messages.
"""


class CubesegError(Exception):
    exit_code = 1


class ConfigError(CubesegError, ValueError):
    exit_code = 2


class ShapeError(CubesegError, ValueError):
    exit_code = 2


class NotFoundError(CubesegError, LookupError):
    exit_code = 3


class CompatibilityError(CubesegError):
    exit_code = 4


class DivergenceError(CubesegError, ArithmeticError):
    exit_code = 5

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class WriteError(CubesegError, OSError):
    exit_code = 6

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


# scene construction
class EmptyStageError(CubesegError):
    pass


class SupportViolationError(CubesegError):
    pass


class ResolutionError(CubesegError):
    pass


# data handling
class UnknownLabelError(CubesegError, ValueError):
    pass


class LabelRangeError(CubesegError, ValueError):
    pass


class InfeasibleSplitError(CubesegError):
    pass


class EmptySplitError(CubesegError):
    pass


# metrics
class EmptyMetricError(CubesegError):
    pass
