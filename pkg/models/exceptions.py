"""Exception hierarchy shared by models, control algorithms and agents."""
from typing import Optional

import numpy as np


class ToolkitError(Exception):
    """Base class for every error raised by the toolkit."""


class EvaluationDomainError(ToolkitError, ValueError):
    """Dynamics produced a non-finite value or were evaluated off their domain."""

    def __init__(self, message: str, step: Optional[int] = None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class NotStabilizableError(ToolkitError, RuntimeError):
    """Riccati iteration diverged or the resulting gain does not stabilize."""


class PolicySolveError(ToolkitError, RuntimeError):
    """Neither the fixed-point nor the grid fallback found a stationary input."""

    def __init__(self, x: np.ndarray, residual: float):
        self.x = np.array(x, dtype=float)
        self.residual = residual
        super().__init__(
            f"greedy policy solve failed at x={np.array2string(self.x, precision=6)} "
            f"(first-order residual {residual:.3e})"
        )


class ConfigurationError(ToolkitError, ValueError):
    """Inconsistent run configuration."""


class MarginError(ToolkitError, ValueError):
    """An error margin is outside the range a formula needs (e.g. c >= 1)."""


class EstimationError(ToolkitError, RuntimeError):
    """Controllability constants could not be estimated from the samples."""


class CertificationError(ToolkitError, RuntimeError):
    """Certificates refused: adjust the training domain or the basis and repeat."""


class BoundInvalidError(ToolkitError, ValueError):
    """Performance bound requested below the horizon threshold (alpha1 <= 0)."""


class InfeasibleStartError(ToolkitError, ValueError):
    """Initial state lies outside the state box."""


class ClosedLoopError(ToolkitError, RuntimeError):
    """A solver error raised inside the receding-horizon loop."""

    def __init__(self, step: int, cause: Exception):
        super().__init__(f"closed loop failed at step {step}: {cause}")
        self.step = step
        self.cause = cause
