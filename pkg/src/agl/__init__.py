"""Auxiliary gene learning with a differentiable, HVG-ranked top-k selector."""

from agl.errors import (
    AglError,
    ConfigError,
    DataError,
    EvaluationError,
    OracleError,
    ParseError,
    ReportError,
    TrainingError,
)

__version__ = "0.1.0"

__all__ = [
    "AglError",
    "ConfigError",
    "DataError",
    "EvaluationError",
    "OracleError",
    "ParseError",
    "ReportError",
    "TrainingError",
]
