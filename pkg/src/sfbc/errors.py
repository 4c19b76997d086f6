"""Shared exception types."""


class ConfigurationError(ValueError):
    """Inconsistent shapes, unknown names or invalid configuration values."""


class DatasetError(RuntimeError):
    """Corrupt, truncated or mismatching dataset files."""


class SimulationFault(RuntimeError):
    """Solver produced non-physical state (NaN positions, rho <= 0, ...)."""


class TrainingDiverged(RuntimeError):
    """Loss became NaN/inf during optimization."""

    def __init__(self, update_index: int, message: str = ""):
        self.update_index = update_index
        super().__init__(message or f"loss diverged at update {update_index}")
