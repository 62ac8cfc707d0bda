from pathlib import Path

import numpy as np
import pytest
from scipy import linalg

from agents.training_agent import avi_config, initial_policy
from config.pipeline import load_config
from control.avi import (
    AviConfig,
    TrainingSummary,
    draw_samples,
    fit_policy_approximant,
    gamma0_estimate,
    greedy_objective,
    greedy_policy_solve,
    input_constraint_check,
    relative_weight_change,
    residual_margin,
    run_avi,
    stability_margin_bound,
    stability_margin_check,
    theorem1_bounds_check,
)
from control.lqr import dare_solve, riccati_step
from models.approximator import MonomialBasis, QuadraticValue, ValueApproximant
from models.exceptions import ConfigurationError, MarginError, NotStabilizableError
from models.system import BoxSet, linearize

from conftest import TOY_K, TOY_P

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


# --------------------------------------------------
# LQR
# --------------------------------------------------

def test_dare_solves_scalar_case():
    lqr = dare_solve(np.array([[0.5]]), np.array([[1.0]]), np.eye(1), np.eye(1))
    assert lqr.P[0, 0] == pytest.approx(TOY_P, rel=1e-10)
    assert lqr.K[0, 0] == pytest.approx(TOY_K, rel=1e-10)
    assert lqr.spectral_radius == pytest.approx(0.5 - TOY_K, rel=1e-8)
    assert lqr.policy(np.array([[2.0]])) == pytest.approx(np.array([[-2.0 * TOY_K]]))


def test_dare_matches_scipy(linear):
    A, B = linearize(linear.system, np.zeros(4), np.zeros(2))
    lqr = dare_solve(A, B, linear.cost.Qmat, linear.cost.Rmat)
    P_ref = linalg.solve_discrete_are(A, B, linear.cost.Qmat, linear.cost.Rmat)
    assert np.allclose(lqr.P, P_ref, rtol=1e-8, atol=1e-10)
    assert lqr.spectral_radius < 1.0
    assert lqr.dare_residual(A, B, linear.cost.Qmat, linear.cost.Rmat) < 1e-8


def test_dare_refuses_unstabilizable_pair():
    with pytest.raises(NotStabilizableError):
        dare_solve(np.array([[2.0]]), np.array([[0.0]]), np.eye(1), np.eye(1))


def test_riccati_step_is_symmetric(rng):
    M = rng.normal(size=(3, 3))
    P_next, gain = riccati_step(M @ M.T, rng.normal(size=(3, 3)), rng.normal(size=(3, 1)), np.eye(3), np.eye(1))
    assert np.array_equal(P_next, P_next.T)
    assert gain.shape == (1, 3)


# --------------------------------------------------
# Configuration and greedy policy
# --------------------------------------------------

def test_avi_config_defaults_and_validation(toy):
    config = AviConfig(omega=toy.omega, p=50)
    assert config.p_test == 200
    with pytest.raises(ConfigurationError):
        AviConfig(omega=toy.omega, init_mode="random")
    with pytest.raises(ConfigurationError):
        AviConfig(omega=toy.omega, delta_lstar=0.0)
    with pytest.raises(ConfigurationError):
        AviConfig(omega=BoxSet.symmetric(2.0, 1), state_box=toy.state_box)


def test_draw_samples_is_seeded(toy):
    config = AviConfig(omega=toy.omega, p=20, seed=3)
    train_a, test_a = draw_samples(config)
    train_b, test_b = draw_samples(config)
    assert np.array_equal(train_a, train_b) and np.array_equal(test_a, test_b)
    assert train_a.shape == (20, 1) and test_a.shape == (80, 1)


def test_greedy_policy_recovers_lqr_gain(toy):
    basis = MonomialBasis.build(1, (2,))
    value = ValueApproximant.quadratic(basis, np.array([[TOY_P]]))
    x = np.array([[0.3], [-0.2], [0.0]])
    u = greedy_policy_solve(value, toy.system, toy.cost, x)
    assert np.allclose(u, -TOY_K * x, atol=1e-9)
    assert greedy_policy_solve(value, toy.system, toy.cost, np.array([0.3])).shape == (1,)


def test_greedy_policy_beats_input_grid(rendezvous, rng):
    A, B = linearize(rendezvous.system, np.zeros(4), np.zeros(2))
    lqr = dare_solve(A, B, rendezvous.cost.Qmat, rendezvous.cost.Rmat)
    value = ValueApproximant.quadratic(MonomialBasis.build(4, (2, 3)), lqr.P)
    states = rendezvous.omega.sample(rng, 50)
    U = greedy_policy_solve(value, rendezvous.system, rendezvous.cost, states)
    grid = rendezvous.input_box.grid(21)
    for x, u in zip(states, U):
        best = greedy_objective(value, rendezvous.system, rendezvous.cost, x, u)
        candidates = greedy_objective(value, rendezvous.system, rendezvous.cost, np.broadcast_to(x, (len(grid), 4)), grid)
        assert best <= candidates.min() + 1e-9


def test_residual_margin_needs_samples_above_threshold(toy):
    basis = MonomialBasis.build(1, (2,))
    value = ValueApproximant.quadratic(basis, np.array([[TOY_P]]))
    tiny = np.full((5, 1), 1e-4)
    with pytest.raises(ConfigurationError):
        residual_margin(value, value, toy.system, toy.cost, tiny, -TOY_K * tiny, delta_lstar=1e-4)


# --------------------------------------------------
# Margins
# --------------------------------------------------

def test_gamma0_from_quadratic_initial_cost(toy, rng):
    value = QuadraticValue(np.array([[TOY_P]]))
    samples = toy.omega.sample(rng, 10)
    assert gamma0_estimate(value, toy.cost, 0.0, samples) == pytest.approx(TOY_P)
    assert gamma0_estimate(value, toy.cost, 0.5, samples) == pytest.approx(2.0 * TOY_P)
    with pytest.raises(MarginError):
        gamma0_estimate(value, toy.cost, 1.0, samples)


def test_stability_margin_bound():
    assert stability_margin_bound(1.0) == pytest.approx(3.0 - np.sqrt(8.0))
    assert stability_margin_check(0.1, 1.0)
    assert not stability_margin_check(0.2, 1.0)


def test_relative_weight_change():
    assert relative_weight_change(np.array([2.0, 0.1]), np.array([1.0, 0.0])) == pytest.approx(1.0)
    assert relative_weight_change(np.array([1.5]), np.array([0.5])) == pytest.approx(1.0)


# --------------------------------------------------
# Training loop
# --------------------------------------------------

def toy_run(toy, **overrides):
    init = initial_policy(toy.system, toy.cost, overrides.pop("r_scale", 10.0))
    params = dict(omega=toy.omega, p=60, max_iterations=200, w_tol=1e-12, degrees=(2,),
                  state_box=toy.state_box)
    params.update(overrides)
    return run_avi(AviConfig(**params), toy.system, toy.cost, init.policy, toy.input_box, P_lqr=init.P), init


def test_toy_training_converges_to_riccati_solution(toy):
    run, _ = toy_run(toy)
    assert run.converged_at is not None
    assert run.c < 1e-6
    assert run.flagged_iterations == ()
    assert run.value.w[0] == pytest.approx(TOY_P, rel=1e-8)
    assert np.allclose(run.policy(np.array([[0.4]])), -TOY_K * 0.4, atol=1e-8)
    assert run.weights.shape == (run.iterations + 1, 1)
    assert len(run.c_per_iter) == run.iterations + 1
    assert run.stability_margin_ok


def test_training_weights_follow_riccati_iterates(linear):
    init = initial_policy(linear.system, linear.cost, 10.0)
    config = AviConfig(omega=linear.omega, p=60, max_iterations=30, w_tol=0.0, degrees=(2,))
    run = run_avi(config, linear.system, linear.cost, init.policy, linear.input_box)
    A, B = linearize(linear.system, np.zeros(4), np.zeros(2))

    assert run.iterations == 31
    assert run.c < 1e-6
    P = run.value_at(0).quadratic_matrix()
    for i in range(1, run.weights.shape[0]):
        P, _ = riccati_step(P, A, B, linear.cost.Qmat, linear.cost.Rmat)
        assert np.allclose(run.value_at(i).quadratic_matrix(), P, rtol=1e-6, atol=1e-9)


def test_converged_training_reproduces_dare(linear):
    init = initial_policy(linear.system, linear.cost, 10.0)
    config = AviConfig(omega=linear.omega, p=60, max_iterations=500, w_tol=1e-12, degrees=(2,))
    run = run_avi(config, linear.system, linear.cost, init.policy, linear.input_box)
    A, B = linearize(linear.system, np.zeros(4), np.zeros(2))
    Q, R = linear.cost.Qmat, linear.cost.Rmat
    P_ref = linalg.solve_discrete_are(A, B, Q, R)
    K_ref = np.linalg.solve(R + B.T @ P_ref @ B, B.T @ P_ref @ A)

    assert run.c < 1e-6
    P = run.value.quadratic_matrix()
    assert np.linalg.norm(P - P_ref) <= 1e-4 * np.linalg.norm(P_ref)

    states = 0.1 * np.eye(4)
    K = -run.policy(states).T / 0.1
    assert np.allclose(K, K_ref, rtol=0.0, atol=1e-4)


@pytest.mark.slow
def test_rendezvous_training_settles_below_unit_margin():
    config = load_config(str(CONFIGS / "rendezvous.json"))
    resolved = config.resolve()
    init = initial_policy(resolved.system, resolved.cost, config.training.init_r_scale)
    run = run_avi(avi_config(config, resolved), resolved.system, resolved.cost, init.policy,
                  resolved.input_box, P_lqr=init.P)

    assert run.basis.size == 30
    assert 0.05 < run.c < 0.8
    assert run.converged_at is not None and run.converged_at <= 60
    assert run.gamma0 is not None


def test_theorem1_bounds_hold_in_exact_case(linear):
    init = initial_policy(linear.system, linear.cost, 10.0)
    config = AviConfig(omega=linear.omega, p=60, max_iterations=10, w_tol=0.0, degrees=(2,))
    run = run_avi(config, linear.system, linear.cost, init.policy, linear.input_box)
    report = theorem1_bounds_check(run, linear.cost)
    assert report.violations == 0
    assert len(report.frame) == run.weights.shape[0]
    assert (report.frame["min_ratio"] >= 1.0 - 1e-9).all()


def test_lqr_shortcut_starts_at_zero_margin(toy):
    run, init = toy_run(toy, r_scale=1.0, init_mode="lqr-shortcut")
    assert run.c_per_iter[0] < 1e-9
    assert run.value_at(0).w[0] == pytest.approx(init.P[0, 0])
    assert run.fit_reports[0] is None


def test_too_few_samples_for_basis(rendezvous):
    init = initial_policy(rendezvous.system, rendezvous.cost)
    config = AviConfig(omega=rendezvous.omega, p=20, degrees=(2, 3))
    with pytest.raises(ConfigurationError, match="basis functions"):
        run_avi(config, rendezvous.system, rendezvous.cost, init.policy)


def test_frames_have_expected_columns(toy):
    run, _ = toy_run(toy, max_iterations=3, w_tol=0.0)
    weights = run.weights_frame()
    errors = run.errors_frame()
    assert list(weights.columns) == ["iter", "w1"]
    assert len(weights) == 5
    assert list(errors.columns) == ["iter", "sup_eps", "c_i", "excluded", "fit_residual_max", "ridge"]
    assert errors["iter"].tolist() == [-1, 0, 1, 2, 3]


# --------------------------------------------------
# A-posteriori checks and persistence
# --------------------------------------------------

def test_input_constraint_check(toy):
    run, _ = toy_run(toy)
    assert input_constraint_check(run.policy, toy.input_box, run.test_samples).passed
    tight = BoxSet.symmetric(0.05, 1)
    report = input_constraint_check(run.policy, tight, run.test_samples)
    assert not report.passed
    assert report.worst_violation > 0.0


def test_policy_approximant_matches_greedy_policy(toy):
    run, _ = toy_run(toy)
    policy, _, deviation = fit_policy_approximant(run)
    assert deviation < 1e-6
    assert policy(np.array([0.2])) == pytest.approx(-TOY_K * 0.2, abs=1e-6)


def test_training_summary_round_trip(toy):
    run, init = toy_run(toy)
    summary = TrainingSummary.from_run(
        run, "toy1d", init,
        input_constraint_check(run.policy, toy.input_box, run.test_samples),
        theorem1_bounds_check(run, toy.cost),
    )
    restored = TrainingSummary.model_validate_json(summary.model_dump_json())
    x = np.array([[0.3], [-0.1]])
    assert np.allclose(restored.value()(x), run.value(x))
    assert np.allclose(restored.lqr().K, init.K)
    assert restored.stability_margin_passed is True
