"""Exception hierarchy shared by every ghostsa module."""


class GhostSAError(Exception):
    """Base class for all library errors."""


class DimensionError(GhostSAError, ValueError):
    """An array shape does not match what an op expects.

    ``axis`` names the offending dimension (e.g. ``"channels"``).
    """

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class ValidationError(GhostSAError, ValueError):
    """A value is outside its admissible domain."""


class ConfigError(GhostSAError, ValueError):
    """A network configuration is malformed or inconsistent."""

    def __init__(self, message, line=None, column=None):
        where = ""
        if line is not None:
            where = f"line {line}"
            if column is not None:
                where += f", column {column}"
            where += ": "
        super().__init__(where + message)
        self.line = line
        self.column = column


class CheckpointError(GhostSAError, OSError):
    """A checkpoint file is malformed, truncated or of an unknown version."""


class DatasetFormatError(GhostSAError, OSError):
    """A dataset file is missing, truncated or has the wrong header."""

    def __init__(self, message, path=None, offset=None):
        parts = [message]
        if path is not None:
            parts.append(f"file={path}")
        if offset is not None:
            parts.append(f"offset={offset}")
        super().__init__(" ".join(parts))
        self.path = path
        self.offset = offset


class WorkloadTooSmallError(GhostSAError, ValueError):
    """Benchmark workload is too fast to time reliably with the host timer."""
