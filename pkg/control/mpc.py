"""
Finite-horizon optimal control with a terminal cost, and the receding-horizon loop.

The OCP is solved by single shooting over the input sequence. Gradients come
from the backward adjoint recursion through the finite-difference Jacobians;
the input box is enforced by projection, the state box by a quadratic
penalty that escalates while the trajectory still leaves it.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple
import logging

import numpy as np
import pandas as pd

from config.settings import settings
from models.exceptions import ClosedLoopError, EvaluationDomainError, InfeasibleStartError, ToolkitError
from models.system import BoxSet, ControlAffineSystem, Policy, StageCost, Trajectory, jacobians, step

logger = logging.getLogger(__name__)

MIN_STEP_SIZE = 1e-16
MAX_STEP_SIZE = 1e6


@dataclass(frozen=True, eq=False)
class OcpProblem:
    system: ControlAffineSystem
    cost: StageCost
    terminal: object
    N: int
    state_box: BoxSet
    input_box: BoxSet

    def __post_init__(self):
        if self.N < 1:
            raise ValueError(f"horizon N must be at least 1, got {self.N}")

    def with_horizon(self, N: int) -> "OcpProblem":
        return OcpProblem(self.system, self.cost, self.terminal, N, self.state_box, self.input_box)

    def terminal_positivity(self, points_per_axis: int = 5) -> bool:
        """V_f(x) > 0 on a grid over X without the origin; warns instead of raising."""
        grid = self.state_box.grid(points_per_axis)
        grid = grid[np.any(grid != 0.0, axis=1)]
        values = np.asarray(self.terminal(grid))
        positive = bool(np.all(values > 0.0))
        if not positive:
            logger.warning(f"terminal cost is not positive on {int(np.sum(values <= 0.0))} grid points of X")
        return positive


@dataclass(frozen=True, eq=False)
class OcpSolution:
    u_seq: np.ndarray
    x_traj: np.ndarray
    value: float
    kkt_residual: float
    state_violation: float
    iterations: int
    initial_objective: float
    penalty: float
    objective_history: Tuple[float, ...] = ()
    soft_infeasible: bool = False

    @property
    def first_input(self) -> np.ndarray:
        return self.u_seq[0]


def simulate(problem: OcpProblem, x0: np.ndarray, u_seq: np.ndarray) -> np.ndarray:
    x_traj = np.empty((u_seq.shape[0] + 1, problem.system.n))
    x_traj[0] = x0
    for k in range(u_seq.shape[0]):
        x_traj[k + 1] = step(problem.system, x_traj[k], u_seq[k])
    return x_traj


def trajectory_value(problem: OcpProblem, x_traj: np.ndarray, u_seq: np.ndarray) -> float:
    """Sum of stage costs plus V_f(x_N), without any penalty."""
    return float(np.sum(problem.cost.eval_l(x_traj[:-1], u_seq)) + problem.terminal(x_traj[-1]))


def _penalized(problem: OcpProblem, x_traj: np.ndarray, u_seq: np.ndarray, penalty: float) -> float:
    excess = problem.state_box.signed_excess(x_traj[1:])
    return trajectory_value(problem, x_traj, u_seq) + penalty * float(np.sum(excess ** 2))


def _adjoint_gradient(problem: OcpProblem, x_traj: np.ndarray, u_seq: np.ndarray,
                      penalty: float) -> np.ndarray:
    """dJ/du_k = 2R u_k + B_k' lambda_{k+1}, lambda_k = 2Q x_k + 2 mu e_k + A_k' lambda_{k+1}."""
    Q, R = problem.cost.Qmat, problem.cost.Rmat
    A, B = jacobians(problem.system, x_traj[:-1], u_seq)
    excess = problem.state_box.signed_excess(x_traj[1:])

    adjoint = problem.terminal.gradient(x_traj[-1]) + 2.0 * penalty * excess[-1]
    gradient = np.empty_like(u_seq)
    for k in range(u_seq.shape[0] - 1, -1, -1):
        gradient[k] = 2.0 * R @ u_seq[k] + B[k].T @ adjoint
        if k > 0:
            adjoint = 2.0 * Q @ x_traj[k] + 2.0 * penalty * excess[k - 1] + A[k].T @ adjoint
    return gradient


def _projected_gradient(problem: OcpProblem, x0: np.ndarray, u_seq: np.ndarray, penalty: float,
                        max_iterations: int, history: List[float]) -> Tuple[np.ndarray, np.ndarray, float, int]:
    """Projected gradient with Armijo backtracking at a fixed penalty weight."""
    x_traj = simulate(problem, x0, u_seq)
    objective = _penalized(problem, x_traj, u_seq, penalty)
    step_size = 1.0
    pg_norm = np.inf
    iteration = 0
    for iteration in range(1, max_iterations + 1):
        gradient = _adjoint_gradient(problem, x_traj, u_seq, penalty)
        pg_norm = float(np.max(np.abs(u_seq - problem.input_box.project(u_seq - gradient))))
        if pg_norm < settings.ocp_tolerance:
            break

        while step_size >= MIN_STEP_SIZE:
            trial_u = problem.input_box.project(u_seq - step_size * gradient)
            try:
                trial_x = simulate(problem, x0, trial_u)
                trial_objective = _penalized(problem, trial_x, trial_u, penalty)
            except EvaluationDomainError:
                trial_objective = np.inf
            decrease = float(np.sum(gradient * (u_seq - trial_u)))
            if trial_objective <= objective - settings.ocp_armijo * decrease:
                break
            step_size *= 0.5
        else:
            logger.debug(f"line search stalled at projected-gradient norm {pg_norm:.3e}")
            break

        u_seq, x_traj, objective = trial_u, trial_x, trial_objective
        history.append(objective)
        step_size = min(2.0 * step_size, MAX_STEP_SIZE)
    return u_seq, x_traj, pg_norm, iteration


def solve_ocp(problem: OcpProblem, x0: np.ndarray,
              warm_start: Optional[np.ndarray] = None) -> OcpSolution:
    """min over u in U^N of sum l(x_k, u_k) + V_f(x_N) from x0."""
    x0 = np.asarray(x0, dtype=float).reshape(problem.system.n)
    if not problem.state_box.contains(x0):
        raise InfeasibleStartError(f"x0={np.array2string(x0, precision=6)} lies outside the state box")

    if warm_start is None:
        u_seq = np.zeros((problem.N, problem.system.m))
    else:
        u_seq = problem.input_box.project(np.asarray(warm_start, dtype=float).reshape(problem.N, problem.system.m))
    initial_objective = trajectory_value(problem, simulate(problem, x0, u_seq), u_seq)

    penalty = settings.ocp_penalty_initial
    history: List[float] = []
    iterations = 0
    while True:
        budget = settings.ocp_max_iterations - iterations
        u_seq, x_traj, pg_norm, used = _projected_gradient(problem, x0, u_seq, penalty, budget, history)
        iterations += used
        violation = float(np.max(problem.state_box.excess(x_traj[1:])))
        if violation <= settings.ocp_violation_tolerance or penalty >= settings.ocp_penalty_max:
            break
        if iterations >= settings.ocp_max_iterations:
            break
        penalty = min(penalty * settings.ocp_penalty_factor, settings.ocp_penalty_max)
        logger.debug(f"state violation {violation:.3e}, raising penalty to {penalty:g}")

    soft_infeasible = violation > settings.ocp_soft_infeasibility
    if soft_infeasible:
        logger.warning(f"OCP from x0={np.array2string(x0, precision=4)} leaves the state box by {violation:.3e}")
    return OcpSolution(
        u_seq=u_seq,
        x_traj=x_traj,
        value=trajectory_value(problem, x_traj, u_seq),
        kkt_residual=pg_norm,
        state_violation=violation,
        iterations=iterations,
        initial_objective=initial_objective,
        penalty=penalty,
        objective_history=tuple(history),
        soft_infeasible=soft_infeasible,
    )


# --------------------------------------------------
# Closed loop
# --------------------------------------------------

@dataclass(frozen=True, eq=False)
class ClosedLoopResult:
    trajectory: Trajectory
    V_N_sequence: np.ndarray
    alpha_sequence: np.ndarray
    terminal_in_Xf: Optional[np.ndarray] = None
    initial_objectives: np.ndarray = field(default_factory=lambda: np.empty(0))
    soft_infeasible_steps: Tuple[int, ...] = ()

    @property
    def J(self) -> float:
        return self.trajectory.total_cost

    def to_frame(self) -> pd.DataFrame:
        alpha = np.append(self.alpha_sequence, np.nan)
        return self.trajectory.to_frame({"V_N": self.V_N_sequence, "alpha": alpha})


def shift_warm_start(u_seq: np.ndarray) -> np.ndarray:
    """Drop the applied input and repeat the last one."""
    return np.vstack([u_seq[1:], u_seq[-1:]])


def empirical_alpha(V_N_sequence: np.ndarray, stage_costs: np.ndarray,
                    delta_lstar: Optional[float] = None) -> np.ndarray:
    """(V_N(x_k) - V_N(x_{k+1})) / l(x_k, u_k) where the stage cost exceeds delta_lstar, NaN elsewhere."""
    delta_lstar = settings.delta_lstar if delta_lstar is None else delta_lstar
    decrease = V_N_sequence[:-1] - V_N_sequence[1:]
    active = stage_costs > delta_lstar
    alpha = np.full(stage_costs.shape, np.nan)
    alpha[active] = decrease[active] / stage_costs[active]
    return alpha


def receding_horizon(problem: OcpProblem, x0: np.ndarray, steps: int, stop_tol: float = 1e-6,
                     epsilon: Optional[float] = None) -> ClosedLoopResult:
    """Apply kappa_N(x) = u*_0 repeatedly; epsilon is the l* level of X_f when membership is tracked."""
    x0 = np.asarray(x0, dtype=float).reshape(problem.system.n)
    if not problem.state_box.contains(x0):
        raise InfeasibleStartError(f"x0={np.array2string(x0, precision=6)} lies outside the state box")

    states, inputs, costs, values = [x0], [], [], []
    initial_objectives, terminal_flags, soft_steps = [], [], []
    warm_start = None

    def solve_at(k, x, warm):
        try:
            return solve_ocp(problem, x, warm)
        except ToolkitError as e:
            raise ClosedLoopError(k, e) from e

    for k in range(steps):
        x = states[-1]
        if np.linalg.norm(x) < stop_tol:
            break
        solution = solve_at(k, x, warm_start)
        u = solution.first_input
        try:
            x_next = step(problem.system, x, u)
        except EvaluationDomainError as e:
            raise ClosedLoopError(k, e) from e

        values.append(solution.value)
        initial_objectives.append(solution.initial_objective)
        if epsilon is not None:
            terminal_flags.append(bool(problem.cost.eval_lstar(solution.x_traj[-1]) <= epsilon))
        if solution.soft_infeasible:
            soft_steps.append(k)
        inputs.append(u)
        costs.append(float(problem.cost.eval_l(x, u)))
        states.append(x_next)
        warm_start = shift_warm_start(solution.u_seq)

    values.append(solve_at(len(inputs), states[-1], warm_start).value)

    trajectory = Trajectory(
        states=np.vstack(states),
        inputs=np.array(inputs).reshape(len(inputs), problem.system.m),
        stage_costs=np.array(costs),
    )
    V_N_sequence = np.array(values)
    result = ClosedLoopResult(
        trajectory=trajectory,
        V_N_sequence=V_N_sequence,
        alpha_sequence=empirical_alpha(V_N_sequence, trajectory.stage_costs),
        terminal_in_Xf=np.array(terminal_flags, dtype=bool) if epsilon is not None else None,
        initial_objectives=np.array(initial_objectives),
        soft_infeasible_steps=tuple(soft_steps),
    )
    logger.info(f"closed loop: {trajectory.length} steps, J={result.J:.6g}, "
                f"final |x|={np.linalg.norm(states[-1]):.3e}")
    return result


# --------------------------------------------------
# Verification reports
# --------------------------------------------------

@dataclass(frozen=True)
class RdpReport:
    passed: bool
    min_alpha: float
    violating_steps: Tuple[int, ...]
    alpha_required: float


def rdp_check(result: ClosedLoopResult, alpha_required: float,
              delta_lstar: Optional[float] = None) -> RdpReport:
    """V_N(x+) + alpha l(x, kappa_N(x)) <= V_N(x) at every step with l > delta_lstar."""
    if result.trajectory.states.shape[0] < 2:
        raise ValueError("relaxed DP check needs at least one closed-loop step")
    alpha = empirical_alpha(result.V_N_sequence, result.trajectory.stage_costs, delta_lstar)
    active = np.flatnonzero(~np.isnan(alpha))
    violating = tuple(int(k) for k in active if alpha[k] < alpha_required - 1e-6)
    min_alpha = float(np.min(alpha[active])) if active.size else np.nan
    return RdpReport(passed=not violating, min_alpha=min_alpha,
                     violating_steps=violating, alpha_required=alpha_required)


@dataclass(frozen=True)
class DpConsistencyReport:
    V_N: float
    V_N_minus_1: float
    stage_cost: float
    gap: float
    tol: float
    passed: bool


def dp_consistency_check(problem: OcpProblem, x: np.ndarray,
                         tol: Optional[float] = None) -> DpConsistencyReport:
    """|V_N(x) - l(x, kappa_N(x)) - V_{N-1}(f(x, kappa_N(x)))| <= tol."""
    solution = solve_ocp(problem, x)
    u = solution.first_input
    x_next = solution.x_traj[1]
    if problem.N == 1:
        tail = float(problem.terminal(x_next))
    else:
        tail = solve_ocp(problem.with_horizon(problem.N - 1), x_next, solution.u_seq[1:]).value

    stage_cost = float(problem.cost.eval_l(solution.x_traj[0], u))
    gap = abs(solution.value - stage_cost - tail)
    tol = 1e-4 * (1.0 + solution.value) if tol is None else tol
    return DpConsistencyReport(V_N=solution.value, V_N_minus_1=tail, stage_cost=stage_cost,
                               gap=gap, tol=tol, passed=gap <= tol)


@dataclass(frozen=True)
class TerminalReport:
    inside: bool
    ratio: float


def terminal_membership(problem: OcpProblem, solution: OcpSolution, bundle) -> TerminalReport:
    """x_N in X_f = {l*(x) <= epsilon}; ratio l*(x_N) / epsilon."""
    lstar = float(problem.cost.eval_lstar(solution.x_traj[-1]))
    return TerminalReport(inside=lstar <= bundle.epsilon, ratio=lstar / bundle.epsilon)


@dataclass(frozen=True, eq=False)
class ProbeReport:
    frame: pd.DataFrame
    beta: float

    @property
    def beta_required(self) -> float:
        return float(self.frame["value"].max()) if len(self.frame) else 0.0

    @property
    def covered(self) -> bool:
        return bool(self.frame["covered"].all())


def _candidate_value(problem: OcpProblem, x0: np.ndarray, policy: Policy) -> float:
    """Cost of the closed-loop candidate sequence, inf when it leaves X or U."""
    x_traj = np.empty((problem.N + 1, problem.system.n))
    u_seq = np.empty((problem.N, problem.system.m))
    x_traj[0] = x0
    try:
        for k in range(problem.N):
            u_seq[k] = policy(x_traj[k])
            x_traj[k + 1] = step(problem.system, x_traj[k], u_seq[k])
    except EvaluationDomainError:
        return np.inf
    if not (np.all(problem.input_box.contains(u_seq)) and np.all(problem.state_box.contains(x_traj))):
        return np.inf
    return trajectory_value(problem, x_traj, u_seq)


def probe_value_bound(problem: OcpProblem, x0s: Sequence[np.ndarray], beta: float,
                      lqr_policy: Optional[Policy] = None) -> ProbeReport:
    """Upper-bound V_N(x0) with feasible candidates (zero input, LQR) and compare with beta."""
    zero = np.zeros(problem.system.m)
    candidates = {"zero": lambda x: zero}
    if lqr_policy is not None:
        candidates["lqr"] = lqr_policy

    rows = []
    for x0 in x0s:
        x0 = np.asarray(x0, dtype=float).reshape(problem.system.n)
        values = {name: _candidate_value(problem, x0, policy) for name, policy in candidates.items()}
        best = min(values, key=values.get)
        rows.append({
            **{f"x{i + 1}": x0[i] for i in range(problem.system.n)},
            "candidate": best,
            "value": values[best],
            "covered": values[best] <= beta,
        })
    return ProbeReport(frame=pd.DataFrame(rows), beta=beta)
