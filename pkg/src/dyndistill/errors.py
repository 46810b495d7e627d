"""Exception hierarchy shared across the package.

Each class maps to a distinct CLI exit code (see ``dyndistill.cli``).
"""


class DynDistillError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(DynDistillError, ValueError):
    exit_code = 2


class DimensionError(DynDistillError, ValueError):
    exit_code = 4


class ContractError(DynDistillError, RuntimeError):
    exit_code = 4


class EpisodeError(DynDistillError, ValueError):
    exit_code = 4


class FileFormatError(DynDistillError, OSError):
    exit_code = 3


class ParseError(FileFormatError):
    """Malformed binary/text file. ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, offset: int | None = None, path=None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"{message}{suffix}")


class ValidationError(FileFormatError):
    pass


class CheckpointError(FileFormatError):
    pass
