"""Exception hierarchy shared by all modules.

Each exception carries the CLI exit code it maps to.
"""


class MscredError(Exception):
    exit_code = 2


class ConfigError(MscredError):
    exit_code = 1


class DataError(MscredError):
    exit_code = 2


class CSVFormatError(DataError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ShapeError(DataError, ValueError):
    pass


class ContextError(DataError):
    """Not enough left context to build a signature window."""

    def __init__(self, message: str, first_valid: int):
        super().__init__(f"{message} (first valid step is {first_valid})")
        self.first_valid = first_valid


class PlacementError(DataError):
    pass


class CalibrationError(DataError):
    pass


class IncompatibleCheckpointError(MscredError):
    pass


class MissingArtifactError(MscredError):
    pass


class NumericError(MscredError):
    exit_code = 3


class TrainingDivergedError(NumericError):
    pass
