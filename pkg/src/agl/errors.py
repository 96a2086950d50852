"""Exception hierarchy. Each class maps to a CLI exit code."""


class AglError(Exception):
    exit_code = 1


class ConfigError(AglError, ValueError):
    exit_code = 2


class DataError(AglError, ValueError):
    exit_code = 3


class ParseError(DataError):
    """Malformed input file; message carries the path and row/column."""


class TrainingError(AglError, RuntimeError):
    exit_code = 4

    def __init__(self, message, **diagnostics):
        if diagnostics:
            detail = ", ".join(f"{k}={v}" for k, v in diagnostics.items())
            message = f"{message} ({detail})"
        super().__init__(message)
        self.diagnostics = diagnostics


class EvaluationError(AglError, RuntimeError):
    exit_code = 4


class OracleError(AglError, ArithmeticError):
    exit_code = 4


class ReportError(AglError, OSError):
    exit_code = 5
