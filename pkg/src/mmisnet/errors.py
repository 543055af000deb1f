"""Exception types. CLI exit codes hang off ``exit_code``."""


class MMISError(Exception):
    exit_code = 1


class ConfigError(MMISError, ValueError):
    exit_code = 1


class ShapeError(MMISError, ValueError):
    exit_code = 1


class NumericError(MMISError, ArithmeticError):
    exit_code = 3


class GatherIndexError(MMISError, IndexError):
    exit_code = 1


class DataError(MMISError):
    """Anything wrong with data on disk or its description."""

    exit_code = 2


class ManifestError(DataError, ValueError):
    pass


class EncodingError(DataError, ValueError):
    pass


class IngestionError(DataError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("missing files: " + ", ".join(str(p) for p in self.missing))


class FormatError(DataError):
    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class DegenerateLossError(MMISError, ValueError):
    exit_code = 3


class UndefinedAUCError(MMISError, ValueError):
    exit_code = 2


class TrainingDiverged(NumericError):
    def __init__(self, message, checkpoint_path=None):
        self.checkpoint_path = checkpoint_path
        super().__init__(message)
