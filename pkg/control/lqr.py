"""Discrete-time LQR by fixed-point Riccati iteration."""

from dataclasses import dataclass
from typing import Optional, Tuple
import logging

import numpy as np

from config.settings import settings
from models.exceptions import NotStabilizableError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class LqrInit:
    """Gain K (m x n) and cost matrix P (n x n) of u = -Kx."""

    K: np.ndarray
    P: np.ndarray
    iterations: int = 0
    spectral_radius: float = 0.0

    def policy(self, x: np.ndarray) -> np.ndarray:
        return -np.asarray(x, dtype=float) @ self.K.T

    def dare_residual(self, A, B, Qmat, Rmat) -> float:
        P_next, _ = riccati_step(self.P, A, B, Qmat, Rmat)
        return float(np.max(np.abs(P_next - self.P)))


def riccati_step(P: np.ndarray, A: np.ndarray, B: np.ndarray,
                 Qmat: np.ndarray, Rmat: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """One value-iteration step P -> Q + A'PA - A'PB(R+B'PB)^-1 B'PA, with its gain."""
    BtPA = B.T @ P @ A
    gain = np.linalg.solve(Rmat + B.T @ P @ B, BtPA)
    P_next = Qmat + A.T @ P @ A - BtPA.T @ gain
    return 0.5 * (P_next + P_next.T), gain


def dare_solve(A: np.ndarray, B: np.ndarray, Qmat: np.ndarray, Rmat: np.ndarray,
               tol: Optional[float] = None, max_iterations: Optional[int] = None) -> LqrInit:
    """Iterate the Riccati map from P0 = Q until the max-norm change is below tol (relative)."""
    A, B = np.asarray(A, dtype=float), np.asarray(B, dtype=float)
    Qmat, Rmat = np.asarray(Qmat, dtype=float), np.asarray(Rmat, dtype=float)
    tol = settings.dare_tolerance if tol is None else tol
    max_iterations = settings.dare_max_iterations if max_iterations is None else max_iterations

    P = Qmat.copy()
    for iteration in range(1, max_iterations + 1):
        P_next, _ = riccati_step(P, A, B, Qmat, Rmat)
        if not np.all(np.isfinite(P_next)):
            raise NotStabilizableError(f"Riccati iteration diverged after {iteration} steps")
        change = np.max(np.abs(P_next - P))
        P = P_next
        if change < tol * max(1.0, np.max(np.abs(P))):
            break
    else:
        raise NotStabilizableError(f"Riccati iteration did not converge in {max_iterations} steps")

    K = np.linalg.solve(Rmat + B.T @ P @ B, B.T @ P @ A)
    radius = float(np.max(np.abs(np.linalg.eigvals(A - B @ K))))
    if radius >= 1.0:
        raise NotStabilizableError(f"closed-loop spectral radius {radius:.6f} >= 1")

    logger.info(f"DARE solved in {iteration} iterations, closed-loop spectral radius {radius:.6f}")
    return LqrInit(K=K, P=P, iterations=iteration, spectral_radius=radius)
