from typing import Optional


class QuadratureError(ValueError):
    """Raised when a quadrature cannot certify the requested tolerance."""

    def __init__(self, message: str, achieved_error: float, refinement: int):
        super().__init__(message)
        self.achieved_error = achieved_error
        self.refinement = refinement


class InvariantViolation(AssertionError):
    """Raised when an exact identity fails on a realization."""

    def __init__(self, invariant: str, detail: str = ""):
        message = f"Invariant violated: {invariant}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)
        self.invariant = invariant


class ExperimentInterrupted(RuntimeError):
    def __init__(self, frontier: int, checkpoint_path: Optional[str] = None):
        super().__init__(
            f"Interrupted at replicate {frontier}; checkpoint: {checkpoint_path}"
        )
        self.frontier = frontier
        self.checkpoint_path = checkpoint_path
