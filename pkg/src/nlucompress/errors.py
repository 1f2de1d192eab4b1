"""Exception hierarchy shared by every module."""


class NluCompressError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(NluCompressError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(NluCompressError, ValueError):
    """A hyperparameter or argument is out of its valid range."""


class FormatError(NluCompressError, ValueError):
    """A file or byte stream does not follow the expected layout."""


class ParseError(FormatError):
    """A line of a text file could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CodeError(NluCompressError, ValueError):
    """A discrete code is outside its alphabet."""


class LabelError(NluCompressError, ValueError):
    """A label or tag id is outside the schema."""


class SpecError(NluCompressError, ValueError):
    """A corpus specification is inconsistent."""


class TrainingError(NluCompressError, RuntimeError):
    """Training diverged or produced non-finite values."""
