"""Exception hierarchy shared by all poseflow modules."""


class PoseFlowError(Exception):
    """Base class for every error raised by poseflow."""


class DegenerateRotationError(PoseFlowError, ValueError):
    def __init__(self, msg="degenerate 6D vector"):
        super().__init__(msg)


class DivergedError(PoseFlowError, FloatingPointError):
    def __init__(self, msg="diverged"):
        super().__init__(msg)


class ShapeError(PoseFlowError, ValueError):
    pass


class TapeReuseError(PoseFlowError, RuntimeError):
    pass


class FormatError(PoseFlowError, ValueError):
    """A file on disk does not match the expected layout."""


class BadMagicError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    def __init__(self, msg="truncated payload"):
        super().__init__(msg)


class RecordLengthError(FormatError):
    pass


class NonOrthonormalError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class HyperparameterMismatchError(PoseFlowError, ValueError):
    pass


class ConfigError(PoseFlowError, ValueError):
    """Invalid or unknown configuration keys."""
