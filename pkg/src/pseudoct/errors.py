"""Exception types shared across the toolkit.

Every error carries a stable ``code`` string and a process exit status so
the command line driver can report failures as a single parseable line.
"""


class PseudoCTError(Exception):
    code = "Error"
    exit_status = 1


class SingularAffine(PseudoCTError):
    code = "SingularAffine"
    exit_status = 10


class SizeMismatch(PseudoCTError):
    code = "SizeMismatch"
    exit_status = 11


class DegenerateLandmarks(PseudoCTError):
    code = "DegenerateLandmarks"
    exit_status = 12


class EmptyMask(PseudoCTError):
    code = "EmptyMask"
    exit_status = 13


class BoxOutOfRange(PseudoCTError):
    code = "BoxOutOfRange"
    exit_status = 14


class DimsMismatch(PseudoCTError):
    code = "DimsMismatch"
    exit_status = 15


class ShapeMismatch(PseudoCTError):
    code = "ShapeMismatch"
    exit_status = 16


class NonFiniteValue(PseudoCTError):
    code = "NonFiniteValue"
    exit_status = 17

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class InputTooSmall(PseudoCTError):
    code = "InputTooSmall"
    exit_status = 18


class VolumeTooSmall(PseudoCTError):
    code = "VolumeTooSmall"
    exit_status = 19


class ConfigError(PseudoCTError):
    """Raised with every validation problem found, not just the first."""

    code = "ConfigError"
    exit_status = 20

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class CheckpointMismatch(PseudoCTError):
    code = "CheckpointMismatch"
    exit_status = 21


class MissingCase(PseudoCTError):
    code = "MissingCase"
    exit_status = 22


class EmptyDataset(PseudoCTError):
    code = "EmptyDataset"
    exit_status = 23


class FormatError(PseudoCTError):
    code = "FormatError"
    exit_status = 24


class GradCheckFailed(PseudoCTError):
    code = "GradCheckFailed"
    exit_status = 25
