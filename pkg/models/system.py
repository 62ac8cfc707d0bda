"""
Control-affine discrete-time systems, constraint boxes, stage costs and rollouts.

Every evaluator works on a single state of shape (n,) or on a batch of shape
(p, n); batch evaluation is what keeps per-sample work in the training loop
vectorized.
"""

from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Dict, Optional, Tuple
import logging

import numpy as np
import pandas as pd

from .exceptions import EvaluationDomainError

logger = logging.getLogger(__name__)

Evaluator = Callable[[np.ndarray], np.ndarray]
Policy = Callable[[np.ndarray], np.ndarray]

ORIGIN_TOLERANCE = 1e-12
JACOBIAN_STEP = 1e-5


# --------------------------------------------------
# Constraint boxes
# --------------------------------------------------

@dataclass(frozen=True, eq=False)
class BoxSet:
    """Axis-aligned box with the origin strictly inside."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.array(self.lower, dtype=float).reshape(-1)
        upper = np.array(self.upper, dtype=float).reshape(-1)
        if lower.shape != upper.shape:
            raise ValueError(f"box bounds differ in shape: {lower.shape} vs {upper.shape}")
        if not (np.all(lower < 0.0) and np.all(upper > 0.0)):
            raise ValueError("origin must lie strictly inside the box (lower < 0 < upper)")
        lower.setflags(write=False)
        upper.setflags(write=False)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def symmetric(cls, half_width: float, dim: int) -> "BoxSet":
        return cls(-np.full(dim, float(half_width)), np.full(dim, float(half_width)))

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def contains(self, x: np.ndarray, tol: float = 0.0):
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.lower - tol) & (x <= self.upper + tol), axis=-1)

    def signed_excess(self, x: np.ndarray) -> np.ndarray:
        """Componentwise distance outside the box, signed by the violated side."""
        x = np.asarray(x, dtype=float)
        return np.maximum(x - self.upper, 0.0) - np.maximum(self.lower - x, 0.0)

    def excess(self, x: np.ndarray):
        """Largest componentwise distance outside the box (0 inside)."""
        return np.max(np.abs(self.signed_excess(x)), axis=-1)

    def project(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, self.lower, self.upper)

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(count, self.dim))

    def grid(self, points_per_axis: int) -> np.ndarray:
        axes = [np.linspace(lo, hi, points_per_axis) for lo, hi in zip(self.lower, self.upper)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([axis.reshape(-1) for axis in mesh], axis=-1)

    def scaled(self, factor: float) -> "BoxSet":
        return BoxSet(factor * self.lower, factor * self.upper)

    def is_subset_of(self, other: "BoxSet") -> bool:
        return bool(np.all(self.lower >= other.lower) and np.all(self.upper <= other.upper))

    def to_dict(self) -> Dict[str, list]:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}


# --------------------------------------------------
# Dynamics
# --------------------------------------------------

@dataclass(frozen=True, eq=False)
class ControlAffineSystem:
    """x+ = f_a(x) + g_a(x) u with batch-capable evaluators."""

    n: int
    m: int
    drift: Evaluator
    input_matrix: Evaluator
    name: str = "system"

    def __post_init__(self):
        origin = np.zeros(self.n)
        f0 = np.asarray(self.drift(origin), dtype=float)
        g0 = np.asarray(self.input_matrix(origin), dtype=float)
        if f0.shape != (self.n,):
            raise ValueError(f"drift must map R^{self.n} to R^{self.n}, got shape {f0.shape}")
        if g0.shape != (self.n, self.m):
            raise ValueError(f"input matrix must have shape ({self.n}, {self.m}), got {g0.shape}")
        if np.max(np.abs(f0)) > ORIGIN_TOLERANCE:
            raise ValueError(f"{self.name}: drift does not vanish at the origin (|f_a(0)| = {np.max(np.abs(f0)):.3e})")


def step(sys: ControlAffineSystem, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """One step of the dynamics, f_a(x) + g_a(x) u."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape[-1] != sys.n or u.shape[-1] != sys.m:
        raise ValueError(f"{sys.name}: expected state dim {sys.n} and input dim {sys.m}, got {x.shape} and {u.shape}")
    x_next = sys.drift(x) + np.einsum("...ij,...j->...i", sys.input_matrix(x), u)
    if not np.all(np.isfinite(x_next)):
        raise EvaluationDomainError(f"{sys.name}: dynamics returned a non-finite state")
    return x_next


def linear_system(A: np.ndarray, B: np.ndarray, name: str = "linear") -> ControlAffineSystem:
    A = np.array(A, dtype=float)
    B = np.array(B, dtype=float)
    n, m = B.shape

    def drift(x):
        return np.asarray(x, dtype=float) @ A.T

    def input_matrix(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(B, x.shape[:-1] + (n, m))

    return ControlAffineSystem(n=n, m=m, drift=drift, input_matrix=input_matrix, name=name)


def rendezvous_system(dt: float = 0.05) -> ControlAffineSystem:
    """Planar orbital rendezvous, state (X, Y, X_t, Y_t), explicit Euler with step dt."""
    if dt <= 0.0:
        raise ValueError(f"time step must be positive, got {dt}")
    input_block = dt * np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])

    def drift(x):
        x = np.asarray(x, dtype=float)
        X, Y, Xt, Yt = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
        r = np.sqrt((1.0 + X) ** 2 + Y ** 2)
        if np.any(r <= 0.0):
            raise EvaluationDomainError("rendezvous dynamics are singular at r = 0 (X = -1, Y = 0)")
        gravity = 1.0 / r ** 3 - 1.0
        rate = np.stack(
            [Xt, Yt, 2.0 * Yt - (1.0 + X) * gravity, -2.0 * Xt - Y * gravity],
            axis=-1,
        )
        return x + dt * rate

    def input_matrix(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(input_block, x.shape[:-1] + (4, 2))

    return ControlAffineSystem(n=4, m=2, drift=drift, input_matrix=input_matrix, name="rendezvous")


def jacobians(sys: ControlAffineSystem, X: np.ndarray, U: np.ndarray,
              h: float = JACOBIAN_STEP) -> Tuple[np.ndarray, np.ndarray]:
    """Central-difference Jacobians at every row of (X, U); returns A (K,n,n), B (K,n,m)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    U = np.atleast_2d(np.asarray(U, dtype=float))
    K, n = X.shape
    m = U.shape[1]

    shift_x = (h * np.maximum(1.0, np.abs(X)))[:, :, None] * np.eye(n)[None]
    x_plus, x_minus = X[:, None, :] + shift_x, X[:, None, :] - shift_x
    u_rep = np.broadcast_to(U[:, None, :], (K, n, m)).reshape(-1, m)
    f_plus = step(sys, x_plus.reshape(-1, n), u_rep).reshape(K, n, n)
    f_minus = step(sys, x_minus.reshape(-1, n), u_rep).reshape(K, n, n)
    dx = np.einsum("kjj->kj", x_plus - x_minus)
    A = ((f_plus - f_minus) / dx[:, :, None]).transpose(0, 2, 1)

    shift_u = (h * np.maximum(1.0, np.abs(U)))[:, :, None] * np.eye(m)[None]
    u_plus, u_minus = U[:, None, :] + shift_u, U[:, None, :] - shift_u
    x_rep = np.broadcast_to(X[:, None, :], (K, m, n)).reshape(-1, n)
    g_plus = step(sys, x_rep, u_plus.reshape(-1, m)).reshape(K, m, n)
    g_minus = step(sys, x_rep, u_minus.reshape(-1, m)).reshape(K, m, n)
    du = np.einsum("kjj->kj", u_plus - u_minus)
    B = ((g_plus - g_minus) / du[:, :, None]).transpose(0, 2, 1)
    return A, B


def linearize(sys: ControlAffineSystem, x_bar: np.ndarray,
              u_bar: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Jacobians (A, B) of the dynamics at (x_bar, u_bar)."""
    A, B = jacobians(sys, np.reshape(x_bar, (1, sys.n)), np.reshape(u_bar, (1, sys.m)))
    return A[0], B[0]


# --------------------------------------------------
# Stage cost
# --------------------------------------------------

@dataclass(frozen=True, eq=False)
class StageCost:
    """Quadratic stage cost l(x,u) = x'Qx + u'Ru."""

    Qmat: np.ndarray
    Rmat: np.ndarray

    def __post_init__(self):
        for label in ("Qmat", "Rmat"):
            matrix = np.array(getattr(self, label), dtype=float)
            if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
                raise ValueError(f"{label} must be square, got shape {matrix.shape}")
            if not np.allclose(matrix, matrix.T, rtol=0.0, atol=1e-12):
                raise ValueError(f"{label} must be symmetric")
            if np.linalg.eigvalsh(matrix).min() <= 0.0:
                raise ValueError(f"{label} must be positive definite")
            matrix.setflags(write=False)
            object.__setattr__(self, label, matrix)

    @property
    def n(self) -> int:
        return self.Qmat.shape[0]

    @property
    def m(self) -> int:
        return self.Rmat.shape[0]

    @cached_property
    def q_eigenvalues(self) -> Tuple[float, float]:
        eigenvalues = np.linalg.eigvalsh(self.Qmat)
        return float(eigenvalues[0]), float(eigenvalues[-1])

    def eval_l(self, x: np.ndarray, u: np.ndarray):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return (np.einsum("...i,ij,...j->...", x, self.Qmat, x)
                + np.einsum("...i,ij,...j->...", u, self.Rmat, u))

    def eval_lstar(self, x: np.ndarray):
        """l*(x) = min_u l(x,u) = x'Qx."""
        x = np.asarray(x, dtype=float)
        return np.einsum("...i,ij,...j->...", x, self.Qmat, x)

    def alpha_lower(self, s):
        return self.q_eigenvalues[0] * np.square(s)

    def alpha_upper(self, s):
        return self.q_eigenvalues[1] * np.square(s)


# --------------------------------------------------
# Trajectories
# --------------------------------------------------

@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray
    inputs: np.ndarray
    stage_costs: np.ndarray
    state_violation_step: Optional[int] = None
    input_violation_step: Optional[int] = None

    @property
    def length(self) -> int:
        return self.inputs.shape[0]

    @property
    def total_cost(self) -> float:
        return float(np.sum(self.stage_costs))

    def replay(self, sys: ControlAffineSystem) -> np.ndarray:
        states = np.empty_like(self.states)
        states[0] = self.states[0]
        for k in range(self.length):
            states[k + 1] = step(sys, states[k], self.inputs[k])
        return states

    def to_frame(self, extra: Optional[Dict[str, np.ndarray]] = None) -> pd.DataFrame:
        """One row per time index; the final row carries no input or cost."""
        K, n = self.length, self.states.shape[1]
        m = self.inputs.shape[1] if self.inputs.ndim == 2 else 0
        frame = pd.DataFrame({"k": np.arange(K + 1)})
        for i in range(n):
            frame[f"x{i + 1}"] = self.states[:, i]
        for j in range(m):
            frame[f"u{j + 1}"] = np.append(self.inputs[:, j], np.nan)
        frame["l"] = np.append(self.stage_costs, np.nan)
        for column, values in (extra or {}).items():
            frame[column] = values
        return frame


def rollout(sys: ControlAffineSystem, policy: Policy, x0: np.ndarray, K: int,
            cost: StageCost, state_box: Optional[BoxSet] = None,
            input_box: Optional[BoxSet] = None) -> Trajectory:
    """Simulate K steps under a state-feedback policy, flagging the first box exits."""
    if K < 1:
        raise ValueError(f"rollout length must be at least 1, got {K}")
    states = np.empty((K + 1, sys.n))
    inputs = np.empty((K, sys.m))
    costs = np.empty(K)
    states[0] = np.asarray(x0, dtype=float)
    state_violation = None
    input_violation = None
    if state_box is not None and not state_box.contains(states[0]):
        state_violation = 0

    for k in range(K):
        inputs[k] = np.asarray(policy(states[k]), dtype=float).reshape(sys.m)
        costs[k] = cost.eval_l(states[k], inputs[k])
        try:
            states[k + 1] = step(sys, states[k], inputs[k])
        except EvaluationDomainError as e:
            raise EvaluationDomainError(f"{sys.name}: rollout blew up", step=k) from e
        if input_violation is None and input_box is not None and not input_box.contains(inputs[k]):
            input_violation = k
        if state_violation is None and state_box is not None and not state_box.contains(states[k + 1]):
            state_violation = k + 1

    if state_violation is not None or input_violation is not None:
        logger.debug(f"rollout left the boxes: state step {state_violation}, input step {input_violation}")
    return Trajectory(states, inputs, costs, state_violation, input_violation)
