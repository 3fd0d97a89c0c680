"""
tagtriplet Errors
Exception hierarchy shared by all modules. The CLI maps `exit_code` to the
process exit status.
"""

from typing import Any, Dict, Optional


class TagTripletError(Exception):
    """Base class for every error raised by tagtriplet"""
    exit_code = 3


# --- usage / configuration (exit 1) ---

class ConfigError(TagTripletError):
    """Invalid configuration value, unknown key or unusable path"""
    exit_code = 1


class ParameterError(TagTripletError):
    """A numeric parameter is outside its valid range"""
    exit_code = 1

    def __init__(self, name: str, value: Any, expected: str):
        self.name = name
        self.value = value
        super().__init__(f"parameter {name}={value!r} out of range (expected {expected})")


# --- data errors (exit 2) ---

class DataError(TagTripletError):
    exit_code = 2


class ParseError(DataError):
    def __init__(self, path: str, line_no: int, message: str):
        self.path = path
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class EmptyCorpusError(DataError):
    pass


class EmptyMatrixError(DataError):
    pass


class UnknownTrackError(DataError, KeyError):
    def __init__(self, track_id: str):
        self.track_id = track_id
        DataError.__init__(self, f"unknown track_id: {track_id!r}")

    def __str__(self):
        return self.args[0]


class DegenerateVectorError(DataError):
    pass


class DimensionError(DataError):
    pass


class DurationError(DataError):
    def __init__(self, required: float, actual: float):
        self.required = required
        self.actual = actual
        super().__init__(f"clip too short: requires {required:.3f} s, got {actual:.3f} s")


class FormatVersionError(DataError):
    pass


class StateError(DataError):
    pass


class TrainingStallError(DataError):
    """No valid triplet could be formed during a whole epoch"""

    def __init__(self, epoch: int, diagnostics: Optional[Dict[str, float]] = None):
        self.epoch = epoch
        self.diagnostics = diagnostics or {}
        detail = ", ".join(f"{k}={v:.4g}" for k, v in sorted(self.diagnostics.items()))
        super().__init__(f"training stalled in epoch {epoch}: no valid triplet ({detail})")


# --- numerical errors (exit 3) ---

class NumericalError(TagTripletError):
    exit_code = 3


class ConvergenceError(NumericalError):
    def __init__(self, message: str, residual: float):
        self.residual = residual
        super().__init__(f"{message} (achieved residual {residual:.3e})")
