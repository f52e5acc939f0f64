"""Exception types raised across the package."""


class ContractError(ValueError):
    """Raised when an input violates a documented precondition (shapes, sizes)."""


class SimulationError(RuntimeError):
    """Raised when a simulator rejects too many draws."""


class TrainingError(RuntimeError):
    """Raised when optimization produces non-finite values.

    Attributes:
        payload: diagnostic information (epoch, step, offending item, ...).
    """

    def __init__(self, message: str, payload: dict | None = None):
        super().__init__(message)
        self.payload = dict(payload or {})


class CheckpointError(RuntimeError):
    """Raised for unreadable checkpoints or config-hash mismatches."""
