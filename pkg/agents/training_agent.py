"""Training agent: initial LQR policy, value iteration and the a-posteriori checks."""
from typing import Dict, Any
import logging

import numpy as np
import pandas as pd

from config.pipeline import PipelineConfig
from control.avi import (
    AviConfig,
    TrainingSummary,
    fit_policy_approximant,
    input_constraint_check,
    run_avi,
    theorem1_bounds_check,
)
from control.lqr import LqrInit, dare_solve
from models.system import ControlAffineSystem, StageCost, linearize
from .base_agent import BaseAgent, TRAINING_ARTIFACT

logger = logging.getLogger(__name__)


def initial_policy(sys: ControlAffineSystem, cost: StageCost, r_scale: float = 1.0) -> LqrInit:
    """LQR of the linearization at the origin; r_scale > 1 detunes it by weighting the inputs more."""
    A, B = linearize(sys, np.zeros(sys.n), np.zeros(sys.m))
    return dare_solve(A, B, cost.Qmat, r_scale * cost.Rmat)


def avi_config(config: PipelineConfig, resolved) -> AviConfig:
    spec = config.training
    return AviConfig(
        omega=resolved.omega,
        p=spec.p,
        p_test=spec.p_test,
        max_iterations=spec.max_iterations,
        w_tol=spec.w_tol,
        delta_lstar=spec.delta_lstar,
        seed=spec.seed,
        degrees=tuple(spec.degrees),
        ridge=spec.ridge,
        init_mode=spec.init_mode,
        state_box=resolved.state_box,
    )


class TrainingAgent(BaseAgent):
    """Runs value iteration on the training domain and persists the trained cost."""

    def __init__(self):
        super().__init__("TrainingAgent")

    def execute(self, state: Dict[str, Any]) -> Dict[str, Any]:
        config: PipelineConfig = state["pipeline_config"]
        resolved = self.resolve(state)
        store = self.store(state)
        sys, cost = resolved.system, resolved.cost

        init = initial_policy(sys, cost, config.training.init_r_scale)
        self.log_action("initial_policy", {
            "system": sys.name,
            "r_scale": config.training.init_r_scale,
            "spectral_radius": round(init.spectral_radius, 6),
        })

        settings_avi = avi_config(config, resolved)
        run = run_avi(settings_avi, sys, cost, init.policy, resolved.input_box, P_lqr=init.P)

        input_check = input_constraint_check(run.policy, resolved.input_box, run.test_samples)
        if not input_check.passed:
            logger.warning(f"greedy policy leaves U on the test samples (worst excess "
                           f"{input_check.worst_violation:.4g}); shrink omega")
        theorem1 = theorem1_bounds_check(run, cost)

        policy_deviation = None
        if config.training.fit_policy:
            policy, _, policy_deviation = fit_policy_approximant(run, config.training.ridge)
            frame = pd.DataFrame(policy.w_a, columns=[f"u{j + 1}" for j in range(policy.m)])
            frame.insert(0, "feature", [f"x{i + 1}" for i in range(sys.n)] +
                         [f"x{i + 1}*x{j + 1}" for i in range(sys.n) for j in range(sys.n)])
            store.write_frame("policy_weights.csv", frame)

        summary = TrainingSummary.from_run(run, sys.name, init, input_check, theorem1, policy_deviation)
        store.write_frame("weights.csv", run.weights_frame())
        store.write_frame("errors.csv", run.errors_frame())
        store.write_frame("theorem1.csv", theorem1.frame)
        store.write_json(TRAINING_ARTIFACT, summary)

        c_ok = summary.c < 1.0
        state["training"] = summary.model_dump(mode="json")
        state["training_status"] = "completed" if c_ok else "refused"
        self.record_gates(
            state,
            c_below_one=c_ok,
            inputs_in_U=input_check.passed,
            stability_margin=summary.stability_margin_passed,
        )
        if not c_ok:
            state["refusal"] = (f"error margin c = {summary.c:.6g} >= 1 "
                                f"(iterations {summary.flagged_iterations}): adjust omega and/or the basis")

        self.log_action("trained", {
            "c": round(summary.c, 6),
            "gamma0": summary.gamma0,
            "iterations": summary.iterations,
            "converged_at": summary.converged_at,
            "theorem1_violations": summary.theorem1_violations,
        })
        return state
