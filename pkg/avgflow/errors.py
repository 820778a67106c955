"""errors: exception hierarchy raised by the library and mapped to exit codes by the cli."""
from typing import Any, Optional


class AvgFlowError(Exception):
    """base class of every error the package raises on purpose"""

    def to_dict(self) -> dict[str, Any]:
        """machine-readable form written to stderr by the cli"""
        return {"error": self.__class__.__name__, "message": str(self)}


class NumericalError(AvgFlowError):
    """non-finite values, failed decompositions or degenerate estimates"""


class DomainError(AvgFlowError, ValueError):
    """an input violates an operation's precondition"""


class CheckpointError(AvgFlowError):
    """a checkpoint cannot be read or does not match the requested model"""


class DatasetError(AvgFlowError):
    """a dataset file is invalid or a generator request is infeasible"""


class ConfigError(AvgFlowError, ValueError):
    """a configuration file or value is invalid"""


class PipelineError(AvgFlowError):
    """a stage was asked to run before the stage it depends on"""


class TrainingDivergedError(AvgFlowError):
    """training loss grew beyond the divergence limit"""

    def __init__(self, message: str, diagnostics: Optional[dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}

    def to_dict(self) -> dict[str, Any]:
        res = super().to_dict()
        res["diagnostics"] = self.diagnostics
        return res
