"""
Monomial value approximants V(x) = w'Phi(x), the explicit policy approximant
mu(x) = w_a'[x; x (x) x], and regularized least-squares fitting.
"""

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Optional, Tuple
import logging

import numpy as np
from scipy import linalg
from sklearn.preprocessing import PolynomialFeatures

logger = logging.getLogger(__name__)

RIDGE_FLOOR = 1e-10


# --------------------------------------------------
# Monomial basis
# --------------------------------------------------

@dataclass(frozen=True, eq=False)
class MonomialBasis:
    """All monomials of the admitted total degrees, in graded-lexicographic order."""

    n: int
    degrees: Tuple[int, ...]
    exponents: np.ndarray

    @classmethod
    def build(cls, n: int, degrees: Iterable[int] = (2, 3)) -> "MonomialBasis":
        degrees = tuple(sorted({int(d) for d in degrees}))
        if n < 1:
            raise ValueError(f"state dimension must be positive, got {n}")
        if not degrees or degrees[0] < 2:
            raise ValueError(f"monomial degrees must all be >= 2 so that Phi(0) = 0, got {degrees}")

        features = PolynomialFeatures(degree=(degrees[0], degrees[-1]), include_bias=False)
        features.fit(np.zeros((1, n)))
        powers = np.asarray(features.powers_, dtype=int)
        exponents = powers[np.isin(powers.sum(axis=1), degrees)]
        exponents.setflags(write=False)
        return cls(n=n, degrees=degrees, exponents=exponents)

    @property
    def size(self) -> int:
        return self.exponents.shape[0]

    @property
    def total_degrees(self) -> np.ndarray:
        return self.exponents.sum(axis=1)

    @cached_property
    def _column_index(self) -> np.ndarray:
        return np.broadcast_to(np.arange(self.n), self.exponents.shape)

    @cached_property
    def _derivative_exponents(self) -> np.ndarray:
        # (n, l, n): exponents after differentiating by x_j, clipped where the power was 0
        lowered = self.exponents[None, :, :] - np.eye(self.n, dtype=int)[:, None, :]
        return np.maximum(lowered, 0)

    def power_table(self, x: np.ndarray) -> np.ndarray:
        """x_i^k for k = 0..max degree, shape (..., n, max_degree + 1)."""
        x = np.asarray(x, dtype=float)
        table = np.ones(x.shape + (self.degrees[-1] + 1,))
        for k in range(1, self.degrees[-1] + 1):
            table[..., k] = table[..., k - 1] * x
        return table

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        """dPhi/dx with shape (..., l, n), by the power rule."""
        table = self.power_table(x)
        derivative_exponents = self._derivative_exponents
        column_index = np.broadcast_to(np.arange(self.n), derivative_exponents.shape)
        partial = np.prod(table[..., column_index, derivative_exponents], axis=-1)
        return np.swapaxes(partial, -1, -2) * self.exponents


def basis_eval(basis: MonomialBasis, x: np.ndarray) -> np.ndarray:
    """Phi(x) in canonical order; batch shape (..., l)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != basis.n:
        raise ValueError(f"basis expects dimension {basis.n}, got {x.shape}")
    table = basis.power_table(x)
    return np.prod(table[..., basis._column_index, basis.exponents], axis=-1)


# --------------------------------------------------
# Value approximant
# --------------------------------------------------

@dataclass(frozen=True, eq=False)
class ValueApproximant:
    basis: MonomialBasis
    w: np.ndarray

    def __post_init__(self):
        w = np.array(self.w, dtype=float).reshape(-1)
        if w.shape[0] != self.basis.size:
            raise ValueError(f"weight vector has {w.shape[0]} entries, basis has {self.basis.size}")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    def __call__(self, x: np.ndarray):
        return value_eval(self, x)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return value_gradient(self, x)

    @classmethod
    def quadratic(cls, basis: MonomialBasis, P: np.ndarray) -> "ValueApproximant":
        """Weights encoding x'Px in the degree-2 block, zero elsewhere."""
        if 2 not in basis.degrees:
            raise ValueError("a quadratic form needs degree 2 in the basis")
        P = np.asarray(P, dtype=float)
        P = 0.5 * (P + P.T)
        w = np.zeros(basis.size)
        for row, exponent in enumerate(basis.exponents):
            if exponent.sum() != 2:
                continue
            support = np.flatnonzero(exponent)
            if support.size == 1:
                w[row] = P[support[0], support[0]]
            else:
                w[row] = 2.0 * P[support[0], support[1]]
        return cls(basis, w)

    def quadratic_matrix(self) -> Optional[np.ndarray]:
        """P with V(x) = x'Px when every non-quadratic weight is zero, else None."""
        degrees = self.basis.total_degrees
        if 2 not in self.basis.degrees or np.any(self.w[degrees != 2] != 0.0):
            return None
        P = np.zeros((self.basis.n, self.basis.n))
        for weight, exponent in zip(self.w[degrees == 2], self.basis.exponents[degrees == 2]):
            support = np.flatnonzero(exponent)
            if support.size == 1:
                P[support[0], support[0]] = weight
            else:
                P[support[0], support[1]] = P[support[1], support[0]] = 0.5 * weight
        return P


def value_eval(approximant: ValueApproximant, x: np.ndarray):
    return basis_eval(approximant.basis, x) @ approximant.w


def value_gradient(approximant: ValueApproximant, x: np.ndarray) -> np.ndarray:
    return np.einsum("l,...ln->...n", approximant.w, approximant.basis.jacobian(x))


@dataclass(frozen=True, eq=False)
class QuadraticValue:
    """x'Px terminal cost with the same interface as ValueApproximant."""

    P: np.ndarray

    def __post_init__(self):
        P = np.array(self.P, dtype=float)
        P = 0.5 * (P + P.T)
        P.setflags(write=False)
        object.__setattr__(self, "P", P)

    def __call__(self, x: np.ndarray):
        x = np.asarray(x, dtype=float)
        return np.einsum("...i,ij,...j->...", x, self.P, x)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return 2.0 * np.asarray(x, dtype=float) @ self.P

    def quadratic_matrix(self) -> np.ndarray:
        return self.P


# --------------------------------------------------
# Least squares
# --------------------------------------------------

@dataclass(frozen=True)
class FitReport:
    residual_rms: float
    residual_max: float
    condition_estimate: float
    regularization_used: float
    rank: int


def lstsq_fit(features: np.ndarray, targets: np.ndarray,
              ridge: float = 0.0) -> Tuple[np.ndarray, FitReport]:
    """
    Minimize ||A w - b||^2 + ridge ||w||^2 with a pivoted-QR least-squares solve.

    Rank loss at ridge 0 raises the regularization to RIDGE_FLOOR; the value
    actually used is recorded in the report.
    """
    A = np.asarray(features, dtype=float)
    b = np.asarray(targets, dtype=float)
    if ridge < 0.0:
        raise ValueError(f"ridge must be nonnegative, got {ridge}")
    p, size = A.shape
    if p < size:
        logger.warning(f"least squares with {p} samples for {size} weights, applying ridge floor")
        ridge = max(ridge, RIDGE_FLOOR)

    cutoff = max(p, size) * np.finfo(float).eps
    singular_values = linalg.svdvals(A)
    rank = int(np.sum(singular_values > cutoff * singular_values[0])) if singular_values[0] > 0 else 0
    if singular_values.size < size or singular_values[-1] == 0.0:
        condition = float("inf")
    else:
        condition = float(singular_values[0] / singular_values[-1])

    if ridge == 0.0 and rank < size:
        logger.warning(f"feature matrix has rank {rank} < {size}, raising ridge to {RIDGE_FLOOR:g}")
        ridge = RIDGE_FLOOR

    if ridge > 0.0:
        padding = np.zeros((size,) + b.shape[1:])
        system = np.vstack([A, np.sqrt(ridge) * np.eye(size)])
        solution = linalg.lstsq(system, np.concatenate([b, padding]), cond=cutoff, lapack_driver="gelsy")[0]
    else:
        solution = linalg.lstsq(A, b, cond=cutoff, lapack_driver="gelsy")[0]

    residual = A @ solution - b
    report = FitReport(
        residual_rms=float(np.sqrt(np.mean(residual ** 2))) if residual.size else 0.0,
        residual_max=float(np.max(np.abs(residual))) if residual.size else 0.0,
        condition_estimate=condition,
        regularization_used=float(ridge),
        rank=rank,
    )
    return solution, report


# --------------------------------------------------
# Explicit policy approximant
# --------------------------------------------------

def policy_features(x: np.ndarray) -> np.ndarray:
    """Phi_a(x) = [x; x (x) x], including the symmetric duplicates of x (x) x."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    kron = (x[..., :, None] * x[..., None, :]).reshape(x.shape[:-1] + (n * n,))
    return np.concatenate([x, kron], axis=-1)


@dataclass(frozen=True, eq=False)
class PolicyApproximant:
    w_a: np.ndarray

    def __post_init__(self):
        w_a = np.array(self.w_a, dtype=float)
        if w_a.ndim != 2:
            raise ValueError("policy weights must be a (n + n^2, m) matrix")
        n = int(round((-1 + np.sqrt(1 + 4 * w_a.shape[0])) / 2))
        if n + n * n != w_a.shape[0]:
            raise ValueError(f"{w_a.shape[0]} feature rows is not of the form n + n^2")
        w_a.setflags(write=False)
        object.__setattr__(self, "w_a", w_a)

    @property
    def n(self) -> int:
        return int(round((-1 + np.sqrt(1 + 4 * self.w_a.shape[0])) / 2))

    @property
    def m(self) -> int:
        return self.w_a.shape[1]

    @classmethod
    def linear(cls, K: np.ndarray) -> "PolicyApproximant":
        """mu(x) = -Kx with a zero quadratic block."""
        K = np.asarray(K, dtype=float)
        m, n = K.shape
        return cls(np.vstack([-K.T, np.zeros((n * n, m))]))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return policy_eval(self, x)


def policy_eval(policy: PolicyApproximant, x: np.ndarray) -> np.ndarray:
    return policy_features(x) @ policy.w_a


def fit_policy(samples: np.ndarray, inputs: np.ndarray,
               ridge: float = 0.0) -> Tuple[PolicyApproximant, FitReport]:
    """Least-squares fit of mu(x) = w_a'Phi_a(x) to sampled inputs."""
    w_a, report = lstsq_fit(policy_features(samples), np.asarray(inputs, dtype=float), ridge)
    return PolicyApproximant(w_a), report
