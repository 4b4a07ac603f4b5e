"""Exception types shared across the package."""


class PsNetError(Exception):
    """Base class for all package errors."""


class DimensionError(PsNetError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(PsNetError, ValueError):
    """A documented precondition was violated."""


class ParseError(PsNetError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(PsNetError, ValueError):
    """A record or file is missing required fields or disagrees with a config."""


class FormatError(PsNetError, ValueError):
    """Unrecognized file magic or version."""


class CorruptionError(PsNetError, ValueError):
    """Stored payload disagrees with its manifest."""
