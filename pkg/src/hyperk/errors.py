"""Exception hierarchy. The CLI maps each family to an exit code."""

from __future__ import annotations


class HyperkError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(HyperkError):
    exit_code = 2


class DataError(HyperkError):
    exit_code = 3


class IngestError(DataError):
    """Malformed or inconsistent input tables.

    Carries the file, 1-based line number and column name when known so the
    message points straight at the offending cell.
    """

    def __init__(self, message: str, file: str | None = None, line: int | None = None,
                 column: str | None = None):
        self.file = file
        self.line = line
        self.column = column
        where = []
        if file is not None:
            where.append(file)
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column!r}")
        prefix = ":".join(where[:1]) + (" (" + ", ".join(where[1:]) + ")" if len(where) > 1 else "")
        super().__init__(f"{prefix}: {message}" if prefix else message)


class ImputationError(DataError):
    pass


class NumericError(HyperkError):
    exit_code = 4


class ModelError(HyperkError):
    """Contract violations at the model surface (shape mismatch, bad params)."""

    exit_code = 4
