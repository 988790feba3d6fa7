# src/moeprune/errors.py
from __future__ import annotations


class MoePruneError(Exception):
    """Base error; `exit_code` is what the CLI exits with."""

    exit_code = 1

    def __init__(self, message: str, *, field: str | None = None,
                 layer: int | None = None, line: int | None = None):
        super().__init__(message)
        self.field = field
        self.layer = layer
        self.line = line


class ValidationError(MoePruneError):
    exit_code = 2


class ShapeError(ValidationError):
    pass


class StructureError(ValidationError):
    pass


class SequenceLengthError(ValidationError):
    pass


class UndefinedProposalError(ValidationError):
    """A token with zero draft probability can never be proposed."""


class DataError(MoePruneError):
    exit_code = 2


class FeasibilityError(MoePruneError):
    exit_code = 2


class StalenessError(MoePruneError):
    exit_code = 3


class CoverageError(MoePruneError):
    exit_code = 3


class SizeError(MoePruneError):
    exit_code = 4

    def __init__(self, message: str, *, count: int, exact: bool = True):
        super().__init__(message)
        self.count = count
        self.exact = exact


class ArtifactIOError(MoePruneError):
    exit_code = 5
