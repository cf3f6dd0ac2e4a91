"""Exception hierarchy. The CLI maps these onto exit codes."""


class FingerspellError(Exception):
    pass


class ConfigError(FingerspellError, ValueError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


class DataError(FingerspellError, ValueError):
    """Bad input data: manifests, clip files, labels (CLI exit code 3)."""


class ClipFormatError(DataError):
    """A binary clip or checkpoint file failed to parse."""

    def __init__(self, path, offset, reason):
        self.path = str(path)
        self.offset = offset
        self.reason = reason
        super().__init__(f"{self.path}: {reason} at byte offset {offset}")


class CTCInfeasibleError(DataError):
    """Label cannot be emitted in the available number of frames."""
