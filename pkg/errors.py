"""Exception types raised by the lab's library modules."""


class TodLabError(Exception):
    """Base class for all lab errors."""


class RejectedInputError(TodLabError, ValueError):
    """An operation received arguments outside its contract."""


class CheckpointFormatError(TodLabError, ValueError):
    """A TODLAB-CKPT file is malformed, truncated or of the wrong version."""


class CSVParseError(TodLabError, ValueError):
    """A CSV dataset could not be parsed."""

    def __init__(self, message: str, line_number: int | None = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class ConfigError(TodLabError, ValueError):
    """An experiment config or CLI override is invalid."""


class MissingInputError(TodLabError, FileNotFoundError):
    """Expected input files are absent or unreadable; `problems` lists one entry per file."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("missing or unreadable inputs:\n" + "\n".join(f"  - {p}" for p in self.problems))
