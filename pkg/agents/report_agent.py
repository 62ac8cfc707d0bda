"""Report agent: plain-text summary of the artifacts in an output directory."""
from pathlib import Path
from typing import Dict, Any, List, Optional
import logging

import pandas as pd

from config.settings import settings
from storage.artifact_store import GATES
from .base_agent import BaseAgent, CERTIFICATES_ARTIFACT, CLOSEDLOOP_ARTIFACT, TRAINING_ARTIFACT

logger = logging.getLogger(__name__)

REPORTED_ARTIFACTS = (TRAINING_ARTIFACT, CERTIFICATES_ARTIFACT, CLOSEDLOOP_ARTIFACT)
CLOSEDLOOP_COLUMNS = ["terminal", "N", "steps", "J", "V_N_x0", "min_alpha", "alpha_required",
                      "rdp_passed", "performance_bound", "bound_holds", "final_norm"]


def _fmt(value: Any) -> str:
    if value is None:
        return "n/a"
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def _section(title: str, rows: List[tuple]) -> List[str]:
    width = max(len(name) for name, _ in rows)
    return [title] + [f"  {name.ljust(width)}  {_fmt(value)}" for name, value in rows] + [""]


def _gate_text(passed: Optional[bool]) -> str:
    if passed is None:
        return "not evaluated"
    return "passed" if passed else "FAILED"


class ReportAgent(BaseAgent):
    """Summarizes training, certificates and closed loops; never reports a gate it did not see evaluated."""

    def __init__(self):
        super().__init__("ReportAgent")

    def execute(self, state: Dict[str, Any]) -> Dict[str, Any]:
        root = Path(state.get("output_dir") or settings.output_dir)
        if not root.is_dir() or not any(root.iterdir()):
            state["report"] = f"no artifacts in {root}"
            state["report_status"] = "completed"
            return state

        store = self.store(state)
        manifest = store.load_manifest()
        lines = [f"run report: {root}", f"config hash: {_fmt(manifest.config_hash)}", ""]

        training = store.read_json(TRAINING_ARTIFACT) if store.exists(TRAINING_ARTIFACT) else None
        if training:
            lines += _section("Training", [
                ("system", training["system"]),
                ("basis size", training["basis_size"]),
                ("degrees", training["degrees"]),
                ("init mode", training["init_mode"]),
                ("c", training["c"]),
                ("gamma_0", training.get("gamma0")),
                ("iterations", training["iterations"]),
                ("converged at", training.get("converged_at")),
                ("flagged iterations", training["flagged_iterations"] or "none"),
                ("bound-check violations", training["theorem1_violations"]),
                ("worst input excess", training["input_worst_violation"]),
                ("policy fit deviation", training.get("policy_heldout_deviation")),
            ])

        certificates = store.read_json(CERTIFICATES_ARTIFACT) if store.exists(CERTIFICATES_ARTIFACT) else None
        if certificates:
            lines += _section("Certificates", [
                ("C", certificates["C"]),
                ("sigma", certificates["sigma"]),
                ("M", certificates["M"]),
                ("d", certificates["d"]),
                ("epsilon", certificates["epsilon"]),
                ("gamma_V", certificates["gamma_V"]),
                ("N1", certificates["N1"]),
                ("N2", certificates["N2"]),
                ("N_lower", certificates["N_lower"]),
                ("N", certificates.get("N_user")),
                ("alpha1(N)", certificates.get("alpha1_user")),
                ("alpha2(N)", certificates.get("alpha2_user")),
                ("stability margin bound", certificates["stability_margin_bound"]),
            ])

        closedloop = store.read_json(CLOSEDLOOP_ARTIFACT) if store.exists(CLOSEDLOOP_ARTIFACT) else None
        if closedloop and closedloop.get("runs"):
            frame = pd.DataFrame.from_dict(closedloop["runs"], orient="index")
            frame = frame.reindex(columns=[c for c in CLOSEDLOOP_COLUMNS if c in frame.columns])
            lines += ["Closed loop", frame.to_string(float_format=lambda v: f"{v:.6g}", na_rep="n/a"), ""]
            skipped = {tag: run["skipped"] for tag, run in closedloop["runs"].items() if "skipped" in run}
            failed = {tag: run["error"] for tag, run in closedloop["runs"].items() if "error" in run}
            lines += [f"  skipped {tag}: {reason}" for tag, reason in skipped.items()]
            lines += [f"  failed {tag}: {reason}" for tag, reason in failed.items()]
            if skipped or failed:
                lines.append("")

        lines += _section("Gates", [(gate, _gate_text(manifest.gates.get(gate))) for gate in GATES])

        missing = store.missing(list(REPORTED_ARTIFACTS))
        if missing:
            lines.append(f"missing artifacts: {', '.join(missing)}")

        state["report"] = "\n".join(lines).rstrip() + "\n"
        state["report_status"] = "completed"
        self.log_action("reported", {"output_dir": str(root), "missing": missing})
        return state
