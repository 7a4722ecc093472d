"""Error classes shared by the library and the CLI.

Each class is a ``click.ClickException`` so that errors escaping a command are
printed as ``Error: ...`` and mapped to a distinct exit code.
"""

from __future__ import annotations

import click


class ExtremalPartitionError(click.ClickException):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(ExtremalPartitionError):
    """Invalid or incomplete run configuration."""

    exit_code = 1


class InvalidArgumentError(ExtremalPartitionError, ValueError):
    """An argument violates an operation's precondition."""

    exit_code = 1


class ContractViolationError(ExtremalPartitionError):
    """An internal contract was broken, e.g. an infinite penalty evaluated arithmetically."""

    exit_code = 1


class DataError(ExtremalPartitionError):
    """Input data cannot be used: bad values, bad schema, unsatisfiable splits."""

    exit_code = 2


class NumericFailureError(ExtremalPartitionError):
    """A numerical routine produced a non-finite value or failed to factorize."""

    exit_code = 3

    def __init__(self, message: str, inputs: tuple | None = None):
        if inputs is not None:
            message = "{} (inputs: {})".format(message, inputs)
        super().__init__(message)
        self.inputs = inputs
