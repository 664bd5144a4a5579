"""Exception hierarchy shared by all featvol modules."""


class FeatvolError(Exception):
    """Base class for all library errors."""


class InvalidArgumentError(FeatvolError, ValueError):
    pass


class FormatError(FeatvolError, ValueError):
    """A serialized file is malformed.

    ``field`` names the header field or section that failed validation.
    """

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class TruncatedFileError(FormatError):
    pass


class DatasetError(FeatvolError, ValueError):
    pass


class IncompatibleScenesError(FeatvolError):
    """Volumes were trained against different renderer weights."""


class EditScriptError(FeatvolError, ValueError):
    def __init__(self, message, line=None, column=None, op_index=None):
        loc = []
        if line is not None:
            loc.append(f"line {line}, column {column}")
        if op_index is not None:
            loc.append(f"op #{op_index}")
        super().__init__(f"{message} ({'; '.join(loc)})" if loc else message)
        self.line = line
        self.column = column
        self.op_index = op_index


class TrainingDivergedError(FeatvolError, RuntimeError):
    pass


class InvariantViolation(FeatvolError, RuntimeError):
    """An internal contract was broken (e.g. frozen weights changed)."""
