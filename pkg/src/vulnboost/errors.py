"""Exception hierarchy shared by every stage of the pipeline."""


class VulnBoostError(Exception):
    """Base class for library errors."""

    exit_code = 1


class ConfigError(VulnBoostError, ValueError):
    exit_code = 2


class DataError(VulnBoostError, ValueError):
    exit_code = 3


class InvariantError(VulnBoostError, RuntimeError):
    exit_code = 4


class ModelFormatError(DataError):
    """Malformed model file; ``lineno`` is 1-based when known."""

    def __init__(self, message, lineno=None, path=None):
        where = ""
        if path is not None:
            where += f"{path}:"
        if lineno is not None:
            where += f"{lineno}:"
        super().__init__(f"{where} {message}" if where else message)
        self.lineno = lineno
        self.path = path
