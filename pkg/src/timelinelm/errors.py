"""Exception hierarchy shared across the pipeline stages."""


class TimelineLMError(Exception):
    """Base for all errors raised by this package."""


class ConfigError(TimelineLMError):
    """Invalid configuration value or unsatisfiable precondition."""


class DataError(TimelineLMError):
    """Malformed or inconsistent input data."""


class ParseError(DataError):
    """A record file could not be parsed; carries the offending line number."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where += f" in {path}"
        if line is not None:
            where += f" at line {line}"
        super().__init__(message + where)


class StageError(TimelineLMError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"stage '{stage}': {message}")
