"""Plants, stage costs, function approximators and benchmark problems."""
from .system import BoxSet, ControlAffineSystem, StageCost, Trajectory, rollout, step
from .approximator import MonomialBasis, PolicyApproximant, QuadraticValue, ValueApproximant
from .benchmarks import BENCHMARKS, Benchmark, build_benchmark

__all__ = [
    "BoxSet",
    "ControlAffineSystem",
    "StageCost",
    "Trajectory",
    "rollout",
    "step",
    "MonomialBasis",
    "PolicyApproximant",
    "QuadraticValue",
    "ValueApproximant",
    "BENCHMARKS",
    "Benchmark",
    "build_benchmark",
]
