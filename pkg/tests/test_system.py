import numpy as np
import pytest

from models.benchmarks import BENCHMARKS, build_benchmark
from models.exceptions import EvaluationDomainError
from models.system import (
    BoxSet,
    ControlAffineSystem,
    StageCost,
    jacobians,
    linear_system,
    linearize,
    rendezvous_system,
    rollout,
    step,
)


# --------------------------------------------------
# Boxes
# --------------------------------------------------

def test_box_requires_origin_inside():
    with pytest.raises(ValueError, match="origin"):
        BoxSet([0.0, -1.0], [1.0, 1.0])
    with pytest.raises(ValueError, match="shape"):
        BoxSet([-1.0], [1.0, 1.0])


def test_box_contains_excess_and_project():
    box = BoxSet.symmetric(0.5, 2)
    points = np.array([[0.1, -0.2], [0.7, 0.0], [-0.5, 0.5]])
    assert box.contains(points).tolist() == [True, False, True]
    assert box.excess(points) == pytest.approx([0.0, 0.2, 0.0])
    assert np.array_equal(box.project(points)[1], [0.5, 0.0])
    assert box.signed_excess(np.array([-0.8, 0.9])) == pytest.approx([-0.3, 0.4])


def test_box_sample_grid_and_subset(rng):
    box = BoxSet([-1.0, -0.2], [2.0, 0.3])
    samples = box.sample(rng, 200)
    assert samples.shape == (200, 2)
    assert np.all(box.contains(samples))
    assert box.grid(3).shape == (9, 2)
    assert box.scaled(0.5).is_subset_of(box)
    assert not box.is_subset_of(box.scaled(0.5))


# --------------------------------------------------
# Dynamics
# --------------------------------------------------

def test_system_rejects_drift_that_moves_the_origin():
    with pytest.raises(ValueError, match="vanish"):
        ControlAffineSystem(n=1, m=1, drift=lambda x: np.asarray(x) + 1.0,
                            input_matrix=lambda x: np.ones(np.shape(x)[:-1] + (1, 1)))


def test_step_single_and_batch_agree(rendezvous, rng):
    sys = rendezvous.system
    X = rendezvous.omega.sample(rng, 20)
    U = rendezvous.input_box.sample(rng, 20)
    batch = step(sys, X, U)
    single = np.vstack([step(sys, x, u) for x, u in zip(X, U)])
    assert np.allclose(batch, single, rtol=0.0, atol=1e-15)
    assert np.array_equal(step(sys, np.zeros(4), np.zeros(2)), np.zeros(4))


def test_step_is_affine_in_the_input(rendezvous, rng):
    sys = rendezvous.system
    X = rendezvous.omega.sample(rng, 10)
    U1 = rendezvous.input_box.sample(rng, 10)
    U2 = rendezvous.input_box.sample(rng, 10)
    weight = 0.3
    mixed = step(sys, X, weight * U1 + (1.0 - weight) * U2)
    blended = weight * step(sys, X, U1) + (1.0 - weight) * step(sys, X, U2)
    assert np.allclose(mixed, blended, rtol=0.0, atol=1e-14)


def test_linearization_error_is_second_order(rendezvous):
    sys = rendezvous.system
    x_bar = np.array([0.1, -0.1, 0.05, 0.02])
    u_bar = np.array([0.3, -0.2])
    A, B = linearize(sys, x_bar, u_bar)
    delta = np.array([1.0, 0.5, -0.3, 0.2])
    nu = np.array([0.4, -0.6])
    base = step(sys, x_bar, u_bar)

    def error(h):
        moved = step(sys, x_bar + h * delta, u_bar + h * nu)
        return np.linalg.norm(moved - base - A @ (h * delta) - B @ (h * nu))

    for h in (1e-2, 1e-3):
        assert error(h) / error(h / 2.0) == pytest.approx(4.0, abs=0.5)


def test_rendezvous_singularity_raises():
    sys = rendezvous_system()
    with pytest.raises(EvaluationDomainError):
        step(sys, np.array([-1.0, 0.0, 0.0, 0.0]), np.zeros(2))


def test_rendezvous_linearization_matches_hill_equations():
    dt = 0.05
    A, B = linearize(rendezvous_system(dt), np.zeros(4), np.zeros(2))
    rate = np.array([[0.0, 0.0, 1.0, 0.0],
                     [0.0, 0.0, 0.0, 1.0],
                     [3.0, 0.0, 0.0, 2.0],
                     [0.0, 0.0, -2.0, 0.0]])
    assert np.allclose(A, np.eye(4) + dt * rate, atol=1e-7)
    assert np.allclose(B, dt * np.array([[0, 0], [0, 0], [1, 0], [0, 1]]), atol=1e-9)


def test_jacobians_of_linear_system_are_exact(linear, rng):
    sys = linear.system
    X = linear.omega.sample(rng, 5)
    U = linear.input_box.sample(rng, 5)
    A, B = jacobians(sys, X, U)
    A_true = sys.drift(np.eye(4)).T
    B_true = sys.input_matrix(np.zeros(4))
    assert A.shape == (5, 4, 4) and B.shape == (5, 4, 2)
    assert np.allclose(A, A_true, atol=1e-8)
    assert np.allclose(B, B_true, atol=1e-8)


# --------------------------------------------------
# Stage cost and rollouts
# --------------------------------------------------

def test_stage_cost_validation_and_values():
    with pytest.raises(ValueError, match="positive definite"):
        StageCost(np.diag([1.0, 0.0]), np.eye(1))
    with pytest.raises(ValueError, match="symmetric"):
        StageCost(np.array([[1.0, 0.5], [0.0, 1.0]]), np.eye(1))

    cost = StageCost(np.diag([1.0, 4.0]), 2.0 * np.eye(1))
    assert cost.eval_l(np.array([1.0, 1.0]), np.array([1.0])) == pytest.approx(7.0)
    assert cost.eval_lstar(np.array([[1.0, 0.0], [0.0, 0.5]])) == pytest.approx([1.0, 1.0])
    assert cost.q_eigenvalues == pytest.approx((1.0, 4.0))
    assert cost.alpha_lower(2.0) == pytest.approx(4.0)
    assert cost.alpha_upper(2.0) == pytest.approx(16.0)


def test_rollout_replays_and_flags_box_exits():
    sys = linear_system(np.array([[1.2]]), np.array([[1.0]]))
    cost = StageCost(np.eye(1), np.eye(1))
    box = BoxSet.symmetric(1.0, 1)

    trajectory = rollout(sys, lambda x: np.zeros(1), np.array([0.5]), 6, cost, state_box=box, input_box=box)
    assert trajectory.length == 6
    assert np.array_equal(trajectory.replay(sys), trajectory.states)
    assert trajectory.state_violation_step == 4  # 0.5 * 1.2^4 > 1
    assert trajectory.input_violation_step is None
    assert trajectory.total_cost == pytest.approx(sum(0.25 * 1.44 ** k for k in range(6)))

    frame = trajectory.to_frame({"tag": np.arange(7)})
    assert list(frame.columns) == ["k", "x1", "u1", "l", "tag"]
    assert np.isnan(frame["u1"].iloc[-1])


def test_rollout_rejects_empty_horizon(toy):
    with pytest.raises(ValueError):
        rollout(toy.system, lambda x: np.zeros(1), np.array([0.1]), 0, toy.cost)


def test_benchmark_registry(toy):
    assert set(BENCHMARKS) == {"rendezvous", "linear", "toy1d"}
    assert toy.omega.is_subset_of(toy.state_box)
    with pytest.raises(KeyError):
        build_benchmark("pendulum")
    linear = build_benchmark("linear", n=3, m=1, seed=2)
    assert (linear.system.n, linear.system.m) == (3, 1)
