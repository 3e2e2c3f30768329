"""Exception hierarchy.

Each class carries the CLI exit code it maps to, so every subcommand reports
failures the same way.
"""

from __future__ import annotations


class FaultflowError(Exception):
    exit_code = 2


class DataError(FaultflowError):
    """Input data is unusable: malformed, inconsistent, or incompatible."""


class TraceParseError(DataError):
    def __init__(self, message: str, line_no: int | None = None) -> None:
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


class SchemaError(DataError):
    pass


class IntegrityError(DataError):
    pass


class DomainError(DataError, ValueError):
    """A numeric argument is outside the domain of the operation."""


class InsufficientDataError(DataError):
    def __init__(self, executable_id: str, n: int, required: int) -> None:
        self.executable_id = executable_id
        self.n = n
        self.required = required
        super().__init__(
            f"{executable_id}: {n} rows available, at least {required} required to fit"
        )


class TrainingError(FaultflowError):
    exit_code = 3
