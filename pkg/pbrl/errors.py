from __future__ import annotations

from typing import Any, Optional


class PBRLError(RuntimeError):
    # partial run trace, attached by the outer loop when a run fails midway
    trace: Optional[Any] = None


class ValidationError(PBRLError, ValueError):
    pass


class ConfigError(PBRLError, ValueError):
    pass


class ContractViolationError(PBRLError, TypeError):
    pass


class UnsupportedStructureError(PBRLError):
    pass


class OracleFailureError(PBRLError):
    pass


class DivergenceError(PBRLError):
    """Raised when an outer loop leaves the numerically sane region.

    The partial trace collected so far is attached so batch runners can
    persist it next to the successful runs.
    """

    def __init__(self, message: str, trace: Optional[Any] = None):
        super().__init__(message)
        self.trace = trace
