"""Simulation agent: receding-horizon closed loops with the trained or the LQR terminal cost."""
from typing import Dict, Any, List, Optional
import logging

import numpy as np

from config.pipeline import PipelineConfig
from control.avi import TrainingSummary
from control.certificates import CertificateBundle, performance_bound
from control.mpc import OcpProblem, dp_consistency_check, probe_value_bound, rdp_check, receding_horizon
from models.approximator import QuadraticValue
from models.exceptions import ClosedLoopError, ConfigurationError
from .base_agent import BaseAgent, CERTIFICATES_ARTIFACT, CLOSEDLOOP_ARTIFACT, TRAINING_ARTIFACT

logger = logging.getLogger(__name__)

BOUND_TOLERANCE = 1e-9


def required_alpha(bundle: Optional[CertificateBundle], N: int) -> float:
    """alpha1(N, c) when certificates exist and it is positive, else 0 (V_N nonincreasing)."""
    if bundle is None or N < bundle.N_prime:
        return 0.0
    return max(0.0, bundle.alpha1(N))


class SimulationAgent(BaseAgent):
    """Runs the MPC closed loop from every configured initial state."""

    def __init__(self):
        super().__init__("SimulationAgent")

    def _terminal(self, training: TrainingSummary, mode: str):
        if mode == "lqr":
            return QuadraticValue(np.array(training.P_lqr))
        return training.value()

    def _bundle(self, state: Dict[str, Any]) -> Optional[CertificateBundle]:
        document = self.load_artifact(state, "certificates", CERTIFICATES_ARTIFACT)
        return CertificateBundle.model_validate(document) if document else None

    def execute(self, state: Dict[str, Any]) -> Dict[str, Any]:
        config: PipelineConfig = state["pipeline_config"]
        resolved = self.resolve(state)
        store = self.store(state)
        spec = config.simulation

        document = self.load_artifact(state, "training", TRAINING_ARTIFACT)
        if document is None:
            raise ConfigurationError(f"no {TRAINING_ARTIFACT} in {store.root}: run 'train' first")
        training = TrainingSummary.model_validate(document)
        bundle = self._bundle(state)

        mode = state.get("terminal") or spec.terminal
        x0s = [np.asarray(x0, dtype=float) for x0 in (state.get("x0") or spec.x0)]
        if not x0s:
            raise ConfigurationError("no initial states: set simulation.x0 or pass --x0")
        for i, x0 in enumerate(x0s):
            if x0.shape != (resolved.system.n,):
                raise ConfigurationError(f"x0[{i}] has {x0.size} entries, system has {resolved.system.n}")

        problem = OcpProblem(resolved.system, resolved.cost, self._terminal(training, mode),
                             spec.N, resolved.state_box, resolved.input_box)
        problem.terminal_positivity()
        beta = bundle.beta if bundle is not None else config.certification.beta
        feasible = [x0 for x0 in x0s if resolved.state_box.contains(x0)]
        probe = probe_value_bound(problem, feasible, beta, training.lqr().policy)
        probe_rows = probe.frame.to_dict("records")
        if feasible and not probe.covered:
            logger.warning(f"candidate V_N bound {probe.beta_required:.4g} exceeds beta = {beta:.4g}; "
                           f"the certified region may not contain every x0")

        epsilon = bundle.epsilon if bundle is not None and mode == "avi" else None
        alpha_req = required_alpha(bundle, spec.N) if mode == "avi" else 0.0
        runs: Dict[str, Dict[str, Any]] = {}
        failures: List[str] = []
        probe_index = 0
        for i, x0 in enumerate(x0s):
            tag = f"{mode}_{i}"
            entry: Dict[str, Any] = {"x0": x0.tolist(), "terminal": mode, "N": spec.N}
            if not resolved.state_box.contains(x0):
                entry["skipped"] = "x0 lies outside the state box"
                logger.warning(f"{tag}: x0={x0.tolist()} outside X, skipped")
                runs[tag] = entry
                continue
            entry["probe"] = probe_rows[probe_index]
            probe_index += 1

            try:
                result = receding_horizon(problem, x0, spec.steps, spec.stop_tol, epsilon)
            except ClosedLoopError as e:
                entry["error"] = str(e)
                failures.append(tag)
                logger.error(f"{tag}: {e}")
                runs[tag] = entry
                continue

            store.write_frame(f"trajectory_{tag}.csv", result.to_frame())
            entry.update({
                "steps": result.trajectory.length,
                "J": result.J,
                "V_N_x0": float(result.V_N_sequence[0]),
                "final_norm": float(np.linalg.norm(result.trajectory.states[-1])),
                "soft_infeasible_steps": list(result.soft_infeasible_steps),
                "alpha_required": alpha_req,
            })
            if result.trajectory.length >= 1:
                rdp = rdp_check(result, alpha_req, config.training.delta_lstar)
                entry.update({
                    "min_alpha": rdp.min_alpha,
                    "rdp_passed": rdp.passed,
                    "rdp_violating_steps": list(rdp.violating_steps),
                })
            if result.terminal_in_Xf is not None and result.terminal_in_Xf.size:
                entry["terminal_in_Xf"] = result.terminal_in_Xf.tolist()

            dp = dp_consistency_check(problem, x0)
            entry.update({"dp_gap": dp.gap, "dp_passed": dp.passed})

            if bundle is not None and mode == "avi" and alpha_req > 0.0:
                bound = performance_bound(bundle, entry["V_N_x0"], spec.N)
                holds = result.J <= bound + BOUND_TOLERANCE * max(1.0, bound)
                entry.update({"performance_bound": bound, "bound_holds": bool(holds)})

            runs[tag] = entry
            self.log_action("closed_loop", {
                "tag": tag,
                "J": round(result.J, 6),
                "steps": result.trajectory.length,
                "min_alpha": entry.get("min_alpha"),
            })

        payload = store.read_json(CLOSEDLOOP_ARTIFACT) if store.exists(CLOSEDLOOP_ARTIFACT) else {}
        payload.setdefault("runs", {})
        payload["runs"] = {tag: run for tag, run in payload["runs"].items() if not tag.startswith(f"{mode}_")}
        payload["runs"].update(runs)
        store.write_json(CLOSEDLOOP_ARTIFACT, payload)

        state["simulations"] = payload
        state["x0"] = [x0.tolist() for x0 in x0s]
        if failures:
            state["simulation_status"] = "failed"
            state["error"] = f"closed loop failed for {', '.join(failures)}"
        else:
            state["simulation_status"] = "completed"
        return state
