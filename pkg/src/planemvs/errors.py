"""Exception hierarchy shared by all stages."""


class MVSError(Exception):
    """Base class for every error raised by planemvs."""


class FileMissing(MVSError, FileNotFoundError):
    pass


class ParseError(MVSError, ValueError):
    """Malformed input line; ``line`` is 1-based."""

    def __init__(self, path, line: int, message: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


class LinkError(MVSError, ValueError):
    """A record references an id that does not exist."""


class DecodeError(MVSError, ValueError):
    pass


class IoError(MVSError, OSError):
    pass


class FormatError(MVSError, ValueError):
    pass


class DomainError(MVSError, ValueError):
    pass


class DegenerateProjection(MVSError, ArithmeticError):
    pass


class DegenerateHomography(MVSError, ArithmeticError):
    pass


class OutOfBounds(MVSError, IndexError):
    pass


class EmptySupport(MVSError, ValueError):
    pass


class NoNeighbors(MVSError, ValueError):
    pass


class BorderHit(MVSError):
    """A mapped window sample left the source image."""


class ZeroVariance(MVSError, ArithmeticError):
    pass


class ConfigError(MVSError, ValueError):
    pass


class StageError(MVSError):
    """Wraps any failure inside a pipeline stage with the stage name."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
