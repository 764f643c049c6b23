from typing import Optional


class KinefitException(Exception):
    """Base exception for kinefit. `exit_code` is what the CLI returns for it."""
    exit_code = 1


class ConfigError(KinefitException):
    """Exception raised when a config or input file is missing or unreadable."""
    exit_code = 3


class StreamParseError(KinefitException):
    """Exception raised when a stream line is not valid JSON."""
    exit_code = 4

    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class SchemaError(StreamParseError):
    """Exception raised when a record has the wrong fields, joint count or shape."""


class InvalidInputError(KinefitException):
    """Exception raised for non-finite, mis-shaped or inconsistent inputs."""
    exit_code = 5


class InvalidTimestampError(InvalidInputError):
    """Exception raised when a stream timestamp does not increase."""


class BehindCameraError(InvalidInputError):
    """Exception raised when projecting a point at or behind the camera plane."""


class ScriptInvalidError(InvalidInputError):
    """Exception raised when a motion script is unusable, e.g. puts a joint behind the camera."""

    def __init__(self, message: str, frame: Optional[int] = None):
        self.frame = frame
        if frame is not None:
            message = f"frame {frame}: {message}"
        super().__init__(message)


class DegenerateInputError(KinefitException):
    """Exception raised when measured geometry collapses (zero-length bones)."""
    exit_code = 6


class DegeneratePredictionError(DegenerateInputError):
    """Exception raised when a predicted bone has zero length."""

    def __init__(self, joint: str):
        self.joint = joint
        super().__init__(f"predicted bone ending at joint '{joint}' has zero length")


class DegeneratePalmError(DegenerateInputError):
    """Exception raised when a root-to-MCP direction cannot be normalized."""


class InsufficientDataError(KinefitException):
    """Exception raised when there are not enough frames for an estimate."""
    exit_code = 6


class SolverDivergedError(KinefitException):
    """Exception raised when the energy becomes non-finite during descent."""
    exit_code = 7

    def __init__(self, message: str, last_pose=None):
        self.last_pose = last_pose
        super().__init__(message)
