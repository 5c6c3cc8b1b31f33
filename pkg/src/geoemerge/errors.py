"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An input violates a documented precondition or type invariant."""


class EmptySupportError(ValueError):
    """An operation was asked to reduce over an empty pixel/token set."""


class GenerationError(RuntimeError):
    """Scene generation failed (invalid config or placement exhaustion)."""


class TrainingAborted(RuntimeError):
    """Training hit a non-finite loss; carries the last-good checkpoint path."""

    def __init__(self, message: str, checkpoint_path: str | None = None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
