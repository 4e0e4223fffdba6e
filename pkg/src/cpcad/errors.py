"""Exception types shared across the toolkit."""


class CpcadError(Exception):
    """Base class for all toolkit errors."""


class ContractError(CpcadError):
    """An argument or call sequence violated a documented precondition."""


class NumericalError(CpcadError):
    """A computation produced non-finite values."""


class ParseError(CpcadError):
    """A file or config string could not be parsed."""

    def __init__(self, message, *, line=None, offset=None):
        loc = ""
        if line is not None:
            loc = f" (line {line})"
        elif offset is not None:
            loc = f" (byte offset {offset})"
        super().__init__(message + loc)
        self.line = line
        self.offset = offset


class CheckpointError(CpcadError):
    """A checkpoint file is malformed or inconsistent with the model."""


class ConfigError(CpcadError):
    """A config key or value is unknown or invalid."""
