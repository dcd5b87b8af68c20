# Copyright 2026 The pclab authors
# See LICENSE file for licensing details.

"""Exceptions raised by the lab."""

from typing import Optional


class LabError(RuntimeError):
    """Base class for custom errors raised by this package."""


class ParameterError(LabError, ValueError):
    """Raised when a numeric parameter is out of its admissible range."""


class GeometryError(LabError, ValueError):
    """Raised when box, grid and process geometry are inconsistent."""


class UnknownLabelError(LabError, KeyError):
    """Raised when a point label does not exist in a cloud."""


class ContractError(LabError, ValueError):
    """Raised when a caller breaks a documented precondition."""


class MaterialError(LabError, ValueError):
    """Raised when a coefficient matrix is not symmetric or not elliptic."""


class ShapeError(LabError, ValueError):
    """Raised when fields living on different grids are combined."""


class CombinatorialGuardError(LabError):
    """Raised when a subset enumeration would exceed its configured cap."""


class SolverDefectError(LabError):
    """Raised when a solve violates the discrete energy inequality."""


class ConvergenceError(LabError):
    """Raised when the linear solver hits its iteration cap."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class ConfigError(LabError, ValueError):
    """Raised when an experiment config fails validation."""

    def __init__(self, message: str, field_path: Optional[str] = None):
        super().__init__(f"{field_path}: {message}" if field_path else message)
        self.field_path = field_path
