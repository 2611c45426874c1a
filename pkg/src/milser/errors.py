"""Exception hierarchy shared by every stage of the pipeline."""


class MilserError(Exception):
    """Base class; the CLI reports these as stage failures."""


class ClipTooShort(MilserError):
    pass


class InvalidRate(MilserError):
    pass


class InvalidRange(MilserError):
    pass


class ShapeMismatch(MilserError, ValueError):
    pass


class UtteranceTooShort(MilserError):
    pass


class EmptyBag(MilserError):
    pass


class DegenerateData(MilserError):
    pass


class EmptyClass(MilserError):
    pass


class FoldMismatch(MilserError):
    pass


class MissingField(MilserError):
    pass


class ParseError(MilserError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DuplicateId(ParseError):
    pass


class NotFound(MilserError, KeyError):
    pass


class CorruptStore(MilserError):
    pass


class ConfigError(MilserError):
    pass


class UnsupportedAudio(MilserError):
    pass
