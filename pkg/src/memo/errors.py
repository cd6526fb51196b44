"""Exception hierarchy shared across the package."""


class MemoError(Exception):
    pass


class DimensionError(MemoError, ValueError):
    pass


class StaleTapeError(MemoError, RuntimeError):
    pass


class NumericalError(MemoError, ArithmeticError):
    pass


class MorphologyError(MemoError, ValueError):
    pass


class OverlapError(MorphologyError):
    pass


class CoverageError(MorphologyError):
    pass


class ArityError(MorphologyError):
    pass


class TrainingDiverged(MemoError, RuntimeError):
    pass


class ValidationFailure(MemoError, RuntimeError):
    """Distilled policy missed the validation bar; ``result`` holds what was trained."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class ConfigError(MemoError, ValueError):
    pass


class ParseError(ConfigError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class UnknownKeyError(ConfigError):
    pass


class MissingKeyError(ConfigError):
    pass


class MissingPrerequisite(MemoError, FileNotFoundError):
    pass


class CheckpointError(MemoError, IOError):
    pass


class VersionMismatch(CheckpointError):
    pass


class CorruptFile(CheckpointError):
    pass


class TypeMismatch(MemoError, ValueError):
    pass


class ArityMismatch(MemoError, ValueError):
    pass


class AggregationError(MemoError, ValueError):
    pass
