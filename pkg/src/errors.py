"""Exception types raised across the package.

Scripts map these onto process exit codes (see ``EXIT_CODES``).
"""
from typing import Any, Optional


class QafelError(Exception):
    """Base class for all errors raised by this package."""


class QuantizerError(QafelError):
    """Invalid quantizer spec, invalid input vector or non-contracting scheme."""


class DatasetError(QafelError):
    """Malformed dataset content."""

    def __init__(self, message: str, line_number: Optional[int] = None) -> None:
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class DatasetNotFoundError(DatasetError):
    """A referenced dataset file does not exist."""

    def __init__(self, path: str, hint: str = "") -> None:
        message = f"Dataset file not found: '{path}'."
        if hint:
            message = f"{message} {hint}"
        super().__init__(message)
        self.path = path


class ObjectiveError(QafelError):
    """Objective evaluated with inconsistent inputs."""


class OracleNotConvergedError(QafelError):
    """The full-batch minimizer hit its iteration cap."""

    def __init__(self, message: str, x_best: Any, f_best: float) -> None:
        super().__init__(message)
        self.x_best = x_best
        self.f_best = f_best


class ProtocolError(QafelError):
    """A protocol state transition was called out of its precondition."""


class InfeasibleConfigError(QafelError):
    """A run configuration cannot be executed."""

    def __init__(self, message: str, report: Optional[dict] = None) -> None:
        super().__init__(message)
        self.report = report or {}


class InfeasibleStepsizeError(QafelError):
    """No step-size scaling satisfies the convergence conditions."""


class SweepAxisError(QafelError):
    """Sweep axis names an unknown field or has no values."""


class VerificationFailedError(QafelError):
    """At least one acceptance criterion failed."""

    def __init__(self, message: str, report: Optional[dict] = None) -> None:
        super().__init__(message)
        self.report = report or {}


EXIT_CODES = {
    DatasetNotFoundError: 2,
    InfeasibleConfigError: 3,
    InfeasibleStepsizeError: 3,
    SweepAxisError: 4,
    VerificationFailedError: 5,
}


def exit_code_for(error: BaseException) -> int:
    """Returns the process exit code for an exception (1 when unmapped)."""
    for error_type, code in EXIT_CODES.items():
        if isinstance(error, error_type):
            return code
    return 1
