"""Exception hierarchy shared across the package."""


class IpcSemError(Exception):
    """Base class for all package errors."""


class ModelSyntaxError(IpcSemError):
    """Raised when model description text cannot be parsed.

    Carries the 1-based line and column of the offending token when known.
    """

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        if line is not None:
            message = f"line {line}: {message}" if column is None else (
                f"line {line}, column {column}: {message}"
            )
        super().__init__(message)


class ModelError(IpcSemError):
    """Raised for structurally invalid models (name collisions, unknown variables)."""


class DataError(IpcSemError):
    """Raised for unusable data: too few rows, non-finite values, singular covariance."""


class ConvergenceError(IpcSemError):
    """Raised when the optimizer fails to reach the convergence criteria."""


class IdentificationError(IpcSemError):
    """Raised when the information matrix is singular (model not identified)."""
