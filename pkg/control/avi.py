"""
Stabilizing value iteration with approximation errors.

Starting from a stabilizing policy mu_{-1}, the cost approximant is fitted,
then greedy policies and cost updates alternate until the weights settle.
Every iteration records the residual epsilon_i on held-out test samples and
the error margin c_i = max |epsilon_i| / l*.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Tuple
import logging

import numpy as np
import pandas as pd
from pydantic import BaseModel
from scipy import linalg

from config.settings import settings
from control.lqr import LqrInit
from models.approximator import (
    FitReport,
    MonomialBasis,
    PolicyApproximant,
    ValueApproximant,
    basis_eval,
    fit_policy,
    lstsq_fit,
)
from models.exceptions import ConfigurationError, MarginError, PolicySolveError
from models.system import BoxSet, ControlAffineSystem, Policy, StageCost, step

logger = logging.getLogger(__name__)

INIT_MODES = ("fit", "lqr-shortcut")
FALLBACK_DAMPINGS = (0.25, 0.1, 0.05)


# --------------------------------------------------
# Configuration
# --------------------------------------------------

@dataclass(frozen=True, eq=False)
class AviConfig:
    omega: BoxSet
    p: int = 500
    p_test: Optional[int] = None
    max_iterations: int = 60
    w_tol: float = 1e-3
    delta_lstar: float = field(default_factory=lambda: settings.delta_lstar)
    seed: int = 0
    degrees: Tuple[int, ...] = (2, 3)
    ridge: float = 0.0
    init_mode: str = "fit"
    state_box: Optional[BoxSet] = None

    def __post_init__(self):
        if self.p_test is None:
            object.__setattr__(self, "p_test", 4 * self.p)
        if self.p < 1 or self.p_test < 1:
            raise ConfigurationError(f"sample counts must be positive (p={self.p}, p_test={self.p_test})")
        if self.delta_lstar <= 0.0:
            raise ConfigurationError(f"delta_lstar must be positive, got {self.delta_lstar}")
        if self.max_iterations < 0:
            raise ConfigurationError(f"max_iterations must be nonnegative, got {self.max_iterations}")
        if self.init_mode not in INIT_MODES:
            raise ConfigurationError(f"init_mode must be one of {INIT_MODES}, got '{self.init_mode}'")
        if self.state_box is not None and not self.omega.is_subset_of(self.state_box):
            raise ConfigurationError("training domain omega must lie inside the state box")


# --------------------------------------------------
# Greedy policy (one-step lookahead under V_i)
# --------------------------------------------------

def greedy_objective(value, sys: ControlAffineSystem, cost: StageCost,
                     x: np.ndarray, u: np.ndarray):
    """l(x,u) + V(f(x,u))."""
    return cost.eval_l(x, u) + value(step(sys, x, u))


def _input_gradient(value, drift: np.ndarray, G: np.ndarray, U: np.ndarray) -> np.ndarray:
    """g_a(x)' grad V(f_a(x) + g_a(x) u) for every row."""
    x_next = drift + np.einsum("pij,pj->pi", G, U)
    return np.einsum("pij,pi->pj", G, value.gradient(x_next))


def _damped_fixed_point(value, cost: StageCost, drift: np.ndarray, G: np.ndarray,
                        U: np.ndarray, damping: float, tol: float,
                        max_iterations: int) -> Tuple[np.ndarray, np.ndarray]:
    R_inv = np.linalg.inv(cost.Rmat)
    for _ in range(max_iterations):
        target = -0.5 * _input_gradient(value, drift, G, U) @ R_inv.T
        U_next = (1.0 - damping) * U + damping * target
        change = np.max(np.abs(U_next - U), axis=-1)
        U = U_next
        if np.all(change < tol):
            break
    residual = np.max(np.abs(2.0 * U @ cost.Rmat.T + _input_gradient(value, drift, G, U)), axis=-1)
    return U, residual


def _grid_fallback(value, sys: ControlAffineSystem, cost: StageCost, x: np.ndarray,
                   drift: np.ndarray, G: np.ndarray, input_box: BoxSet) -> np.ndarray:
    candidates = input_box.grid(settings.greedy_fallback_grid)
    with np.errstate(all="ignore"):
        objective = cost.eval_l(x, candidates) + value(drift[0] + candidates @ G[0].T)
    objective = np.where(np.isfinite(objective), objective, np.inf)
    start = candidates[np.argmin(objective)][None, :]

    best_residual = np.inf
    for damping in FALLBACK_DAMPINGS:
        U, residual = _damped_fixed_point(
            value, cost, drift, G, start, damping,
            settings.greedy_tolerance, settings.greedy_fallback_max_iterations,
        )
        if residual[0] < settings.greedy_residual_tolerance:
            logger.warning(f"greedy solve at x={np.array2string(x, precision=4)} needed the grid fallback "
                           f"(damping {damping})")
            return U[0]
        if np.isfinite(residual[0]):
            best_residual = min(best_residual, float(residual[0]))
    raise PolicySolveError(x, best_residual)


def greedy_policy_solve(value, sys: ControlAffineSystem, cost: StageCost, x: np.ndarray,
                        input_box: Optional[BoxSet] = None) -> np.ndarray:
    """
    Minimizer of l(x,u) + V(f(x,u)) over all of R^m via its first-order condition.

    Accepts a single state or a batch; rows whose damped fixed point does not
    reach the residual tolerance are retried from the best point of a coarse
    grid over input_box (a unit box when none is given).
    """
    x = np.asarray(x, dtype=float)
    X = np.atleast_2d(x)
    drift = np.asarray(sys.drift(X), dtype=float)
    G = np.asarray(sys.input_matrix(X), dtype=float)

    U, residual = _damped_fixed_point(
        value, cost, drift, G, np.zeros((X.shape[0], sys.m)),
        settings.greedy_damping, settings.greedy_tolerance, settings.greedy_max_iterations,
    )
    failed = np.flatnonzero(~(residual < settings.greedy_residual_tolerance))
    if failed.size:
        box = input_box if input_box is not None else BoxSet.symmetric(1.0, sys.m)
        for s in failed:
            U[s] = _grid_fallback(value, sys, cost, X[s], drift[s:s + 1], G[s:s + 1], box)
    return U[0] if x.ndim == 1 else U


@dataclass(frozen=True, eq=False)
class GreedyPolicy:
    """State feedback mu(x) = argmin_u l(x,u) + V(f(x,u))."""

    value: object
    system: ControlAffineSystem
    cost: StageCost
    input_box: Optional[BoxSet] = None

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return greedy_policy_solve(self.value, self.system, self.cost, x, self.input_box)


# --------------------------------------------------
# Cost fitting and error margins
# --------------------------------------------------

@dataclass(frozen=True, eq=False)
class MarginReport:
    epsilon: np.ndarray
    sup_epsilon: float
    c: float
    excluded: int


def residual_margin(new_value, old_value, sys: ControlAffineSystem, cost: StageCost,
                    samples: np.ndarray, inputs: np.ndarray,
                    delta_lstar: Optional[float] = None) -> MarginReport:
    """epsilon(x) = V_new(x) - l(x,u) - V_old(f(x,u)) and c = max |epsilon|/l* over l* >= delta_lstar."""
    delta_lstar = settings.delta_lstar if delta_lstar is None else delta_lstar
    epsilon = new_value(samples) - cost.eval_l(samples, inputs) - old_value(step(sys, samples, inputs))
    lstar = cost.eval_lstar(samples)
    retained = lstar >= delta_lstar
    if not np.any(retained):
        raise ConfigurationError(f"every test sample has l* below delta_lstar={delta_lstar:g}")
    return MarginReport(
        epsilon=epsilon,
        sup_epsilon=float(np.max(np.abs(epsilon))),
        c=float(np.max(np.abs(epsilon[retained]) / lstar[retained])),
        excluded=int(np.sum(~retained)),
    )


def init_cost(config: AviConfig, sys: ControlAffineSystem, cost: StageCost, mu_init: Policy,
              basis: MonomialBasis, train: np.ndarray, test: np.ndarray,
              P_lqr: Optional[np.ndarray] = None
              ) -> Tuple[ValueApproximant, MarginReport, Optional[FitReport]]:
    """Initial approximant V_0 of the cost of mu_init and its margin c_{-1} on the test samples."""
    fit_report = None
    if config.init_mode == "lqr-shortcut":
        if P_lqr is None:
            raise ConfigurationError("init_mode 'lqr-shortcut' needs the LQR cost matrix")
        initial = ValueApproximant.quadratic(basis, P_lqr)
    else:
        inputs = mu_init(train)
        features = basis_eval(basis, train) - basis_eval(basis, step(sys, train, inputs))
        w0, fit_report = lstsq_fit(features, cost.eval_l(train, inputs), config.ridge)
        initial = ValueApproximant(basis, w0)

    margin = residual_margin(initial, initial, sys, cost, test, mu_init(test), config.delta_lstar)
    return initial, margin, fit_report


def cost_update(value: ValueApproximant, sys: ControlAffineSystem, cost: StageCost,
                samples: np.ndarray, inputs: np.ndarray,
                ridge: float = 0.0) -> Tuple[ValueApproximant, FitReport]:
    targets = cost.eval_l(samples, inputs) + value(step(sys, samples, inputs))
    w_next, report = lstsq_fit(basis_eval(value.basis, samples), targets, ridge)
    return ValueApproximant(value.basis, w_next), report


def gamma0_estimate(initial_value, cost: StageCost, c_init: float, samples: np.ndarray,
                    delta_lstar: Optional[float] = None) -> float:
    """gamma_0 with V_0 <= gamma_0 l*, using V_0 <= V_hat_0 / (1 - c_{-1})."""
    if c_init >= 1.0:
        raise MarginError(f"gamma_0 needs c_-1 < 1, got {c_init:.6g}")
    P = initial_value.quadratic_matrix()
    if P is not None:
        ratio = float(linalg.eigh(P, cost.Qmat, eigvals_only=True)[-1])
    else:
        delta_lstar = settings.delta_lstar if delta_lstar is None else delta_lstar
        lstar = cost.eval_lstar(samples)
        retained = lstar >= delta_lstar
        if not np.any(retained):
            raise ConfigurationError(f"every sample has l* below delta_lstar={delta_lstar:g}")
        ratio = float(np.max(initial_value(samples[retained]) / lstar[retained]))
    if ratio <= 0.0:
        raise MarginError("initial cost approximant is not positive on the samples")
    return ratio / (1.0 - c_init)


def stability_margin_bound(gamma0: float) -> float:
    """1 + 2g - sqrt(4g^2 + 4g), evaluated as 1 / (1 + 2g + 2 sqrt(g^2 + g))."""
    return 1.0 / (1.0 + 2.0 * gamma0 + 2.0 * np.sqrt(gamma0 ** 2 + gamma0))


def stability_margin_check(c: float, gamma0: float) -> bool:
    return bool(0.0 <= c < stability_margin_bound(gamma0))


# --------------------------------------------------
# Training loop
# --------------------------------------------------

@dataclass(frozen=True, eq=False)
class AviRun:
    config: AviConfig
    basis: MonomialBasis
    weights: np.ndarray
    c_per_iter: np.ndarray
    sup_epsilon: np.ndarray
    excluded: np.ndarray
    epsilons: Tuple[np.ndarray, ...]
    fit_reports: Tuple[Optional[FitReport], ...]
    gamma0: Optional[float]
    converged_at: Optional[int]
    flagged_iterations: Tuple[int, ...]
    value: ValueApproximant
    policy: GreedyPolicy
    train_samples: np.ndarray
    test_samples: np.ndarray

    @property
    def c(self) -> float:
        return float(np.max(self.c_per_iter))

    @property
    def iterations(self) -> int:
        return self.weights.shape[0] - 1

    @property
    def stability_margin_ok(self) -> Optional[bool]:
        if self.gamma0 is None:
            return None
        return stability_margin_check(self.c, self.gamma0)

    def value_at(self, i: int) -> ValueApproximant:
        return ValueApproximant(self.basis, self.weights[i])

    def weights_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.weights, columns=[f"w{j + 1}" for j in range(self.basis.size)])
        frame.insert(0, "iter", np.arange(self.weights.shape[0]))
        return frame

    def errors_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "iter": np.arange(-1, len(self.c_per_iter) - 1),
            "sup_eps": self.sup_epsilon,
            "c_i": self.c_per_iter,
            "excluded": self.excluded,
            "fit_residual_max": [r.residual_max if r else np.nan for r in self.fit_reports],
            "ridge": [r.regularization_used if r else np.nan for r in self.fit_reports],
        })


def draw_samples(config: AviConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Training then test samples, uniform on omega, from one seeded generator."""
    rng = np.random.default_rng(config.seed)
    train = config.omega.sample(rng, config.p)
    return train, config.omega.sample(rng, config.p_test)


def relative_weight_change(w_new: np.ndarray, w_old: np.ndarray) -> float:
    return float(np.max(np.abs(w_new - w_old) / np.maximum(1.0, np.abs(w_old))))


def run_avi(config: AviConfig, sys: ControlAffineSystem, cost: StageCost, mu_init: Policy,
            input_box: Optional[BoxSet] = None, P_lqr: Optional[np.ndarray] = None) -> AviRun:
    """Fit V_0, then alternate greedy solves and cost updates for i = 0..I or until the weights settle."""
    basis = MonomialBasis.build(sys.n, config.degrees)
    if config.p < basis.size:
        raise ConfigurationError(f"p={config.p} training samples for {basis.size} basis functions")

    train, test = draw_samples(config)
    logger.info(f"AVI on {sys.name}: {basis.size} basis functions, p={config.p}, "
                f"p_test={config.p_test}, init={config.init_mode}")

    value, margin, fit_report = init_cost(config, sys, cost, mu_init, basis, train, test, P_lqr)
    weights = [value.w]
    margins = [margin]
    fit_reports = [fit_report]
    flagged = [-1] if margin.c >= 1.0 else []
    logger.info(f"i=-1: c={margin.c:.6g}, sup|eps|={margin.sup_epsilon:.6g}")

    gamma0 = None
    if margin.c < 1.0:
        gamma0 = gamma0_estimate(value, cost, margin.c, test, config.delta_lstar)
    else:
        logger.warning(f"c_-1 = {margin.c:.6g} >= 1, gamma_0 is undefined")

    previous = value
    converged_at = None
    for i in range(config.max_iterations + 1):
        inputs_train = greedy_policy_solve(value, sys, cost, train, input_box)
        updated, fit_report = cost_update(value, sys, cost, train, inputs_train, config.ridge)
        inputs_test = greedy_policy_solve(value, sys, cost, test, input_box)
        margin = residual_margin(updated, value, sys, cost, test, inputs_test, config.delta_lstar)
        change = relative_weight_change(updated.w, value.w)

        weights.append(updated.w)
        margins.append(margin)
        fit_reports.append(fit_report)
        logger.info(f"i={i}: c={margin.c:.6g}, sup|eps|={margin.sup_epsilon:.6g}, dw={change:.3e}")
        if margin.c >= 1.0:
            flagged.append(i)
            logger.warning(f"i={i}: error margin c_i = {margin.c:.6g} >= 1, adjust omega or the basis")

        previous, value = value, updated
        if change < config.w_tol:
            converged_at = i
            break

    if converged_at is None:
        logger.warning(f"weights did not settle within {config.max_iterations + 1} iterations")

    c_per_iter = np.array([m.c for m in margins])
    logger.info(f"AVI finished: c={c_per_iter.max():.6g}, gamma_0={gamma0}, converged_at={converged_at}")
    return AviRun(
        config=config,
        basis=basis,
        weights=np.vstack(weights),
        c_per_iter=c_per_iter,
        sup_epsilon=np.array([m.sup_epsilon for m in margins]),
        excluded=np.array([m.excluded for m in margins]),
        epsilons=tuple(m.epsilon for m in margins),
        fit_reports=tuple(fit_reports),
        gamma0=gamma0,
        converged_at=converged_at,
        flagged_iterations=tuple(flagged),
        value=value,
        policy=GreedyPolicy(previous, sys, cost, input_box),
        train_samples=train,
        test_samples=test,
    )


# --------------------------------------------------
# A-posteriori checks
# --------------------------------------------------

@dataclass(frozen=True)
class InputCheckReport:
    passed: bool
    worst_violation: float


def input_constraint_check(policy: Policy, input_box: BoxSet, samples: np.ndarray) -> InputCheckReport:
    inputs = np.atleast_2d(policy(samples))
    worst = float(np.max(input_box.excess(inputs), initial=0.0))
    return InputCheckReport(passed=worst == 0.0, worst_violation=worst)


@dataclass(frozen=True, eq=False)
class Theorem1Report:
    frame: pd.DataFrame

    @property
    def violations(self) -> int:
        columns = ["lower_violations", "upper_violations", "decrease_violations"]
        return int(self.frame[columns].to_numpy().sum())


def theorem1_bounds_check(run: AviRun, cost: StageCost,
                          samples: Optional[np.ndarray] = None) -> Theorem1Report:
    """
    Check (1-c) l* <= V_i <= 2 gamma_0 l* and the difference inequality for every iterate.

    With epsilon_i as defined by the residual, the difference inequality is
    V_{i+1}(x) - V_i(x) <= 4c/(1-c) V_0(x), and V_0 <= V_hat_0/(1-c).
    """
    samples = run.test_samples if samples is None else np.atleast_2d(samples)
    lstar = cost.eval_lstar(samples)
    tol = 1e-9 + 1e-6 * lstar
    positive = lstar > 0.0
    c = run.c
    initial = run.value_at(0)(samples)

    rows: List[dict] = []
    values = [run.value_at(i)(samples) for i in range(run.weights.shape[0])]
    for i, V in enumerate(values):
        ratio = V[positive] / lstar[positive]
        row = {
            "iter": i,
            "lower_violations": int(np.sum(V < (1.0 - c) * lstar - tol)),
            "upper_violations": 0,
            "decrease_violations": 0,
            "min_ratio": float(ratio.min()) if ratio.size else np.nan,
            "max_ratio": float(ratio.max()) if ratio.size else np.nan,
        }
        if run.gamma0 is not None:
            row["upper_violations"] = int(np.sum(V > 2.0 * run.gamma0 * lstar + tol))
        if c < 1.0 and i + 1 < len(values):
            slack = 4.0 * c / (1.0 - c) ** 2 * initial
            row["decrease_violations"] = int(np.sum(values[i + 1] - V > slack + tol))
        rows.append(row)

    report = Theorem1Report(pd.DataFrame(rows))
    if report.violations:
        logger.warning(f"value-iteration bound checks: {report.violations} violations over {len(rows)} iterates")
    return report


def fit_policy_approximant(run: AviRun, ridge: float = 0.0) -> Tuple[PolicyApproximant, FitReport, float]:
    """Fit w_a'[x; x (x) x] to the final greedy policy; returns the held-out max deviation too."""
    policy, report = fit_policy(run.train_samples, run.policy(run.train_samples), ridge)
    deviation = float(np.max(np.abs(policy(run.test_samples) - run.policy(run.test_samples))))
    logger.info(f"policy approximant: train residual_max={report.residual_max:.3e}, "
                f"held-out deviation={deviation:.3e}")
    return policy, report, deviation


# --------------------------------------------------
# Persisted training summary
# --------------------------------------------------

class TrainingSummary(BaseModel):
    """Everything later stages need from a training run, as written to training.json."""

    system: str
    degrees: List[int]
    basis_size: int
    init_mode: str
    c: float
    c_per_iter: List[float]
    sup_epsilon: List[float]
    gamma0: Optional[float] = None
    stability_margin_bound: Optional[float] = None
    stability_margin_passed: Optional[bool] = None
    converged_at: Optional[int] = None
    iterations: int
    flagged_iterations: List[int]
    input_check_passed: bool
    input_worst_violation: float
    theorem1_violations: int
    policy_heldout_deviation: Optional[float] = None
    K_lqr: List[List[float]]
    P_lqr: List[List[float]]
    weights: List[float]

    @classmethod
    def from_run(cls, run: AviRun, system_name: str, lqr: LqrInit, input_check: InputCheckReport,
                 theorem1: Theorem1Report, policy_deviation: Optional[float] = None) -> "TrainingSummary":
        bound = stability_margin_bound(run.gamma0) if run.gamma0 is not None else None
        return cls(
            system=system_name,
            degrees=list(run.basis.degrees),
            basis_size=run.basis.size,
            init_mode=run.config.init_mode,
            c=run.c,
            c_per_iter=run.c_per_iter.tolist(),
            sup_epsilon=run.sup_epsilon.tolist(),
            gamma0=run.gamma0,
            stability_margin_bound=bound,
            stability_margin_passed=run.stability_margin_ok,
            converged_at=run.converged_at,
            iterations=run.iterations,
            flagged_iterations=list(run.flagged_iterations),
            input_check_passed=input_check.passed,
            input_worst_violation=input_check.worst_violation,
            theorem1_violations=theorem1.violations,
            policy_heldout_deviation=policy_deviation,
            K_lqr=lqr.K.tolist(),
            P_lqr=lqr.P.tolist(),
            weights=run.value.w.tolist(),
        )

    def value(self) -> ValueApproximant:
        basis = MonomialBasis.build(len(self.P_lqr), self.degrees)
        return ValueApproximant(basis, np.array(self.weights))

    def lqr(self) -> LqrInit:
        return LqrInit(K=np.array(self.K_lqr), P=np.array(self.P_lqr))
