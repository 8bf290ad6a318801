"""
Error Taxonomy
Every failure the back-end can report, grouped by the exit code the CLI maps it to.
"""

from typing import Optional


class BackendError(Exception):
    """Base class for all toolkit errors.

    ``code`` is the stable, machine-parseable name printed by the CLI as
    ``ERROR <code>: <detail>``; ``exit_code`` selects the failure class.
    """

    exit_code = 3

    def __init__(self, detail: str, line: Optional[int] = None):
        self.detail = detail
        self.line = line
        if line is not None:
            detail = f"line {line}: {detail}"
        super().__init__(detail)

    @property
    def code(self) -> str:
        return type(self).__name__


class UsageError(BackendError):
    exit_code = 1


class FormatError(BackendError):
    exit_code = 2


class NumericError(BackendError):
    exit_code = 3


# Usage
class BadRank(UsageError):
    pass


class UnknownPreset(UsageError):
    pass


class ConfigError(UsageError):
    pass


# Format
class DimensionMismatch(FormatError):
    pass


class NonFinite(FormatError):
    pass


class DuplicateId(FormatError):
    pass


class BadNumber(FormatError):
    pass


class BadLabel(FormatError):
    pass


class UnsupportedFormat(FormatError):
    pass


class CorruptArchive(FormatError):
    pass


class UnknownId(FormatError):
    pass


class MissingLabel(FormatError):
    pass


class UnlabeledTrial(FormatError):
    pass


class MalformedLine(FormatError):
    pass


# Numeric
class ZeroVector(NumericError):
    pass


class InsufficientClasses(NumericError):
    pass


class SingularScatter(NumericError):
    pass


class SingularCovariance(NumericError):
    pass


class DomainError(NumericError):
    pass


class EmptyBatch(NumericError):
    pass


class TrainingDiverged(NumericError):
    pass


class DegenerateTrialSet(NumericError):
    pass
