from __future__ import annotations

from typing import Optional


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class ActionNetError(Exception):
    """Base error carrying a stable string code and a process exit code."""

    exit_code = 1
    default_code = "error"

    def __init__(self, message: str, code: Optional[str] = None):
        super().__init__(message)
        self.message = message
        self.code = code or self.default_code

    def __str__(self) -> str:
        return f"[{self.code}] {self.message}"


class ConfigError(ActionNetError):
    exit_code = EXIT_CONFIG
    default_code = "config"


class DataError(ActionNetError):
    exit_code = EXIT_DATA
    default_code = "data"


class FeatureFileError(DataError):
    default_code = "feature_file"


class ManifestError(DataError):
    default_code = "manifest"


class CheckpointError(DataError):
    default_code = "checkpoint"


class NumericError(ActionNetError):
    exit_code = EXIT_NUMERIC
    default_code = "numeric"


class ShapeError(NumericError):
    default_code = "shape_mismatch"


class UndefinedCorrelationError(NumericError):
    default_code = "undefined_correlation"

    def __init__(self, message: str = "undefined correlation: a series is constant"):
        super().__init__(message)
