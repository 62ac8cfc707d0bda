"""Certification agent: controllability constants of the initial policy and the horizon certificates."""
from typing import Dict, Any, List
import logging

from config.pipeline import PipelineConfig
from control.avi import TrainingSummary, draw_samples
from control.certificates import (
    CertificateBundle,
    build_bundle,
    estimate_controllability,
    n1_objective,
    performance_ratio,
    terminal_set_d,
)
from models.exceptions import CertificationError
from .base_agent import BaseAgent, CERTIFICATES_ARTIFACT, TRAINING_ARTIFACT
from .training_agent import avi_config

logger = logging.getLogger(__name__)

HORIZON_TABLE_EXTRA = 10
HORIZON_TABLE_MAX_ROWS = 200


def horizon_table(bundle: CertificateBundle, N_user: int) -> List[Dict[str, Any]]:
    """alpha1, alpha2 and their ratio for N from N' up to a little past max(N_lower, N_user)."""
    last = min(max(bundle.N_lower, N_user) + HORIZON_TABLE_EXTRA,
               bundle.N_prime + HORIZON_TABLE_MAX_ROWS - 1)
    rows = []
    for N in range(bundle.N_prime, last + 1):
        a1 = bundle.alpha1(N)
        rows.append({
            "N": N,
            "alpha1": a1,
            "alpha2": bundle.alpha2(N) if N >= bundle.N_double_prime else None,
            "performance_ratio": performance_ratio(bundle, N)
            if a1 > 0.0 and N >= bundle.N_double_prime else None,
        })
    return rows


class CertificationAgent(BaseAgent):
    """Turns a training summary into a certificate bundle for the configured horizon."""

    def __init__(self):
        super().__init__("CertificationAgent")

    def execute(self, state: Dict[str, Any]) -> Dict[str, Any]:
        config: PipelineConfig = state["pipeline_config"]
        resolved = self.resolve(state)
        store = self.store(state)
        spec = config.certification

        document = self.load_artifact(state, "training", TRAINING_ARTIFACT)
        if document is None:
            raise CertificationError(f"no {TRAINING_ARTIFACT} in {store.root}: run 'train' first")
        training = TrainingSummary.model_validate(document)
        if spec.c_override is not None:
            logger.warning(f"certifying with c overridden: {training.c:.6g} -> {spec.c_override:.6g}")
            training = training.model_copy(update={"c": spec.c_override})

        N_user = config.simulation.N
        try:
            if training.c >= 1.0 or training.gamma0 is None:
                raise CertificationError(
                    f"error margin c = {training.c:.6g} >= 1: adjust omega and/or the basis and retrain"
                )
            _, test = draw_samples(avi_config(config, resolved))
            d = terminal_set_d(resolved.cost, training.gamma0, resolved.omega)
            controllability = estimate_controllability(
                resolved.system, resolved.cost, training.lqr().policy, test,
                M=spec.M,
                sigmas=config.sigma_grid(),
                state_box=resolved.state_box,
                input_box=resolved.input_box,
                objective=n1_objective(training.c, spec.beta, training.gamma0, d),
                delta_lstar=config.training.delta_lstar,
            )
            bundle = build_bundle(training, controllability, resolved.cost, resolved.omega,
                                  spec.beta, N_user=N_user)
        except CertificationError as e:
            logger.error(f"certification refused: {e}")
            state["certification_status"] = "refused"
            state["refusal"] = str(e)
            self.record_gates(state, c_below_one=False)
            return state

        store.write_frame("controllability.csv", controllability.to_frame())
        payload = bundle.model_dump(mode="json")
        payload["horizon_table"] = horizon_table(bundle, N_user)
        store.write_json(CERTIFICATES_ARTIFACT, payload)

        state["certificates"] = payload
        state["certification_status"] = "completed"
        self.record_gates(
            state,
            c_below_one=True,
            stability_margin=bundle.stability_margin_passed,
            horizon_sufficient=bool(bundle.N_user_certified),
        )
        if not bundle.N_user_certified:
            logger.warning(f"N = {N_user} is below the certified horizon N_lower = {bundle.N_lower}")

        self.log_action("certified", {
            "C": round(bundle.C, 6),
            "sigma": bundle.sigma,
            "M": bundle.M,
            "N1": round(bundle.N1, 4),
            "N2": round(bundle.N2, 4),
            "N_lower": bundle.N_lower,
            "N": N_user,
        })
        return state
