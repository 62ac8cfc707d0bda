"""Pipeline orchestrator using LangGraph: train -> certify -> simulate -> report."""
from typing import Dict, Any, List, Optional, TypedDict
import logging

from langgraph.graph import StateGraph, END

from config.pipeline import PipelineConfig, ResolvedPipeline
from config.settings import settings
from storage.artifact_store import ArtifactStore
from .base_agent import BaseAgent
from .training_agent import TrainingAgent
from .certification_agent import CertificationAgent
from .simulation_agent import SimulationAgent
from .report_agent import ReportAgent
from .tracing import annotate_trace, traced

logger = logging.getLogger(__name__)

STAGES = ("train", "certify", "simulate", "report")
BLOCKING_GATES = ("c_below_one", "inputs_in_U", "horizon_sufficient")

EXIT_PASSED = 0
EXIT_FAILED = 1
EXIT_GATE_FAILED = 2


class PipelineState(TypedDict, total=False):
    """State structure for the pipeline workflow."""
    pipeline_config: Optional[PipelineConfig]
    output_dir: str
    artifact_store: ArtifactStore
    resolved: ResolvedPipeline
    x0: List[List[float]]
    terminal: Optional[str]
    training: Dict[str, Any]
    certificates: Dict[str, Any]
    simulations: Dict[str, Any]
    report: str
    training_status: str
    certification_status: str
    simulation_status: str
    report_status: str
    gates: Dict[str, Optional[bool]]
    refusal: str
    status: str
    error: str


def exit_code(state: Dict[str, Any]) -> int:
    """0 when every gate evaluated in this run passed, 2 on a failed gate, 1 on an error."""
    if state.get("status") == "failed" or state.get("error"):
        return EXIT_FAILED
    gates = state.get("gates") or {}
    if any(gates.get(gate) is False for gate in BLOCKING_GATES):
        return EXIT_GATE_FAILED
    return EXIT_PASSED


class PipelineOrchestrator:
    """Pipeline orchestrator using LangGraph for stage coordination."""

    def __init__(self):
        self.training_agent = TrainingAgent()
        self.certification_agent = CertificationAgent()
        self.simulation_agent = SimulationAgent()
        self.report_agent = ReportAgent()
        self.workflow = self._build_workflow()

    def _build_workflow(self) -> StateGraph:
        workflow = StateGraph(PipelineState)

        workflow.add_node("train", self._train_node)
        workflow.add_node("certify", self._certify_node)
        workflow.add_node("simulate", self._simulate_node)
        workflow.add_node("report", self._report_node)
        workflow.add_node("handle_error", self._handle_error_node)

        workflow.set_entry_point("train")

        workflow.add_conditional_edges(
            "train",
            self._should_continue_after_training,
            {
                "continue": "certify",
                "refused": "report",
                "error": "handle_error"
            }
        )

        workflow.add_conditional_edges(
            "certify",
            self._should_continue_after_certification,
            {
                "continue": "simulate",
                "refused": "report",
                "error": "handle_error"
            }
        )

        workflow.add_conditional_edges(
            "simulate",
            self._should_continue_after_simulation,
            {
                "continue": "report",
                "error": "handle_error"
            }
        )

        workflow.add_edge("report", END)
        workflow.add_edge("handle_error", END)

        return workflow.compile()

    # --------------------------------------------------
    # Nodes
    # --------------------------------------------------

    def _run_agent(self, agent: BaseAgent, stage: str, status_key: str,
                   state: PipelineState) -> PipelineState:
        try:
            annotate_trace(stage, output_dir=state.get("output_dir"))
            state = agent.execute(state)
        except Exception as e:
            logger.error(f"{stage} error: {e}")
            state["error"] = str(e)
            state[status_key] = "failed"
        self._record(state, stage)
        return state

    @traced("train")
    def _train_node(self, state: PipelineState) -> PipelineState:
        """Train the terminal cost."""
        return self._run_agent(self.training_agent, "train", "training_status", state)

    @traced("certify")
    def _certify_node(self, state: PipelineState) -> PipelineState:
        """Estimate controllability constants and horizon certificates."""
        return self._run_agent(self.certification_agent, "certify", "certification_status", state)

    @traced("simulate")
    def _simulate_node(self, state: PipelineState) -> PipelineState:
        """Run the receding-horizon closed loops."""
        return self._run_agent(self.simulation_agent, "simulate", "simulation_status", state)

    def _report_node(self, state: PipelineState) -> PipelineState:
        """Summarize the artifacts."""
        try:
            return self.report_agent.execute(state)
        except Exception as e:
            logger.error(f"report error: {e}")
            state["error"] = str(e)
            state["report_status"] = "failed"
            return state

    def _handle_error_node(self, state: PipelineState) -> PipelineState:
        """Handle errors in the workflow."""
        logger.error(f"Pipeline error in {state.get('output_dir')}: {state.get('error')}")
        state["status"] = "failed"
        return state

    def _record(self, state: PipelineState, stage: str):
        """Merge this stage's artifacts and gates into the manifest."""
        config = state.get("pipeline_config")
        store = state.get("artifact_store") or ArtifactStore(state.get("output_dir"))
        state["artifact_store"] = store
        store.update_manifest(
            stage,
            config_hash=config.config_hash() if config is not None else None,
            gates=state.get("gates"),
            x0=state.get("x0") if stage == "simulate" else None,
        )

    # --------------------------------------------------
    # Routing
    # --------------------------------------------------

    def _should_continue_after_training(self, state: PipelineState) -> str:
        if state.get("error") or state.get("training_status") == "failed":
            return "error"
        if state.get("training_status") == "refused":
            return "refused"
        return "continue"

    def _should_continue_after_certification(self, state: PipelineState) -> str:
        if state.get("error") or state.get("certification_status") == "failed":
            return "error"
        if state.get("certification_status") == "refused":
            return "refused"
        return "continue"

    def _should_continue_after_simulation(self, state: PipelineState) -> str:
        if state.get("error") or state.get("simulation_status") == "failed":
            return "error"
        return "continue"

    # --------------------------------------------------
    # Entry points
    # --------------------------------------------------

    def _initial_state(self, config: Optional[PipelineConfig], output_dir: Optional[str],
                       x0: Optional[List[List[float]]] = None,
                       terminal: Optional[str] = None) -> PipelineState:
        if output_dir is None:
            output_dir = (config.output_dir if config is not None else None) or settings.output_dir
        return {
            "pipeline_config": config,
            "output_dir": output_dir,
            "x0": x0 or [],
            "terminal": terminal,
            "training": {},
            "certificates": {},
            "simulations": {},
            "gates": {},
            "training_status": "pending",
            "certification_status": "pending",
            "simulation_status": "pending",
            "report_status": "pending",
            "status": "processing",
            "error": "",
        }

    def _finish(self, state: Dict[str, Any]) -> Dict[str, Any]:
        state = dict(state)
        code = exit_code(state)
        state["status"] = {EXIT_PASSED: "passed", EXIT_GATE_FAILED: "gate_failed"}.get(code, "failed")
        return state

    @traced("pipeline")
    def run_pipeline(self, config: PipelineConfig, output_dir: Optional[str] = None,
                     x0: Optional[List[List[float]]] = None,
                     terminal: Optional[str] = None) -> Dict[str, Any]:
        """Run every stage through the workflow graph."""
        initial_state = self._initial_state(config, output_dir, x0, terminal)
        annotate_trace("pipeline", output_dir=initial_state["output_dir"], system=config.system.name)
        try:
            final_state = self.workflow.invoke(initial_state)
        except Exception as e:
            logger.error(f"Workflow execution error: {e}")
            return {"output_dir": initial_state["output_dir"], "status": "failed", "error": str(e)}
        return self._finish(final_state)

    def run_stage(self, stage: str, config: Optional[PipelineConfig] = None,
                  output_dir: Optional[str] = None, x0: Optional[List[List[float]]] = None,
                  terminal: Optional[str] = None) -> Dict[str, Any]:
        """Run one stage on its own, reading earlier stages from the output directory."""
        if stage not in STAGES:
            raise ValueError(f"unknown stage '{stage}', choose from {STAGES}")
        if stage != "report" and config is None:
            raise ValueError(f"stage '{stage}' needs a config")

        state = self._initial_state(config, output_dir, x0, terminal)
        nodes = {
            "train": self._train_node,
            "certify": self._certify_node,
            "simulate": self._simulate_node,
            "report": self._report_node,
        }
        state = nodes[stage](state)
        if state.get("error"):
            state = self._handle_error_node(state)
        return self._finish(state)
