"""Registry of built-in benchmark systems with their default boxes and stage costs."""

from dataclasses import dataclass
from typing import Callable, Dict
import logging

import numpy as np

from .system import BoxSet, ControlAffineSystem, StageCost, linear_system, rendezvous_system

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Benchmark:
    name: str
    system: ControlAffineSystem
    state_box: BoxSet
    input_box: BoxSet
    omega: BoxSet
    cost: StageCost


def rendezvous_benchmark(dt: float = 0.05) -> Benchmark:
    """Planar rendezvous with X=[-0.5,0.5]^4, U=[-2,2]^2, Q=diag(5,5,5,5), R=I."""
    return Benchmark(
        name="rendezvous",
        system=rendezvous_system(dt),
        state_box=BoxSet.symmetric(0.5, 4),
        input_box=BoxSet.symmetric(2.0, 2),
        omega=BoxSet.symmetric(0.2, 4),
        cost=StageCost(5.0 * np.eye(4), np.eye(2)),
    )


def random_linear_benchmark(n: int = 4, m: int = 2, seed: int = 0, dt: float = 0.1) -> Benchmark:
    """Euler discretization of a random controllable continuous-time pair (A_c, B_c)."""
    rng = np.random.default_rng(seed)
    for _ in range(100):
        A = np.eye(n) + dt * rng.normal(size=(n, n))
        B = dt * rng.normal(size=(n, m))
        controllability = np.hstack([np.linalg.matrix_power(A, k) @ B for k in range(n)])
        if np.linalg.matrix_rank(controllability) == n:
            break
    else:
        raise RuntimeError(f"no controllable pair drawn for seed {seed}")

    logger.debug(f"linear benchmark (n={n}, m={m}, seed={seed}) drawn")
    return Benchmark(
        name="linear",
        system=linear_system(A, B, name="linear"),
        state_box=BoxSet.symmetric(1.0, n),
        input_box=BoxSet.symmetric(10.0, m),
        omega=BoxSet.symmetric(0.5, n),
        cost=StageCost(np.eye(n), np.eye(m)),
    )


def toy1d_benchmark(a: float = 0.5, b: float = 1.0, kappa: float = 0.0) -> Benchmark:
    """Scalar contraction x+ = a x + kappa x^3 + b u on X=U=[-1,1], Omega=[-0.5,0.5]."""

    def drift(x):
        x = np.asarray(x, dtype=float)
        return a * x + kappa * x ** 3

    def input_matrix(x):
        x = np.asarray(x, dtype=float)
        return np.full(x.shape[:-1] + (1, 1), b)

    return Benchmark(
        name="toy1d",
        system=ControlAffineSystem(n=1, m=1, drift=drift, input_matrix=input_matrix, name="toy1d"),
        state_box=BoxSet.symmetric(1.0, 1),
        input_box=BoxSet.symmetric(1.0, 1),
        omega=BoxSet.symmetric(0.5, 1),
        cost=StageCost(np.eye(1), np.eye(1)),
    )


BENCHMARKS: Dict[str, Callable[..., Benchmark]] = {
    "rendezvous": rendezvous_benchmark,
    "linear": random_linear_benchmark,
    "toy1d": toy1d_benchmark,
}


def build_benchmark(name: str, **parameters) -> Benchmark:
    if name not in BENCHMARKS:
        raise KeyError(f"unknown system '{name}', registered: {sorted(BENCHMARKS)}")
    return BENCHMARKS[name](**parameters)
