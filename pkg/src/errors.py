#!/usr/bin/env python3
"""
Error Hierarchy

Every failure the pipeline surfaces to a caller. Each class derives from a
built-in exception as well, so code that catches ValueError keeps working.

Exit codes (used by cli.py):
- 0: success
- 2: config error
- 3: data error
- 4: numerical abort
"""

from typing import Optional


class CompletionError(Exception):
    """Base class for pipeline errors"""
    exit_code = 1


class ConfigError(CompletionError, ValueError):
    """Invalid configuration, always names the offending field"""
    exit_code = 2

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class CheckpointMismatchError(ConfigError):
    """Checkpoint was written with a different configuration"""

    def __init__(self, field: str, expected, found):
        self.expected = expected
        self.found = found
        super().__init__(field, f"checkpoint has {found!r}, config has {expected!r}")


class DataError(CompletionError, ValueError):
    """Missing, malformed, or unusable input data"""
    exit_code = 3


class DegenerateCloudError(DataError):
    """All points coincide, so there is no scale to normalize by"""

    def __init__(self):
        super().__init__("degenerate cloud")


class XYZFormatError(DataError):
    """Malformed XYZ-text file; names the offending line"""

    def __init__(self, path: str, line: int, message: str):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class PairFormatError(DataError):
    """A pair directory is missing files or has a bad meta.json"""


class NumericalError(CompletionError, ArithmeticError):
    """Non-finite loss or gradient"""
    exit_code = 4

    def __init__(self, loss_name: str, message: Optional[str] = None):
        self.loss_name = loss_name
        super().__init__(message or f"non-finite value in {loss_name}")


class TrainingAborted(NumericalError):
    """Too many consecutive rejected steps"""

    def __init__(self, rejections: int, last_loss_name: str):
        self.rejections = rejections
        super().__init__(
            last_loss_name,
            f"aborted after {rejections} consecutive rejected steps (last: {last_loss_name})"
        )


class OutputLockedError(DataError):
    """Another command holds the output directory lock"""
