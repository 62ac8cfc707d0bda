"""Base class for the pipeline stage agents."""
from abc import ABC, abstractmethod
from typing import Dict, Any, Optional
import logging

from config.pipeline import PipelineConfig, ResolvedPipeline
from storage.artifact_store import ArtifactStore

logger = logging.getLogger(__name__)

TRAINING_ARTIFACT = "training.json"
CERTIFICATES_ARTIFACT = "certificates.json"
CLOSEDLOOP_ARTIFACT = "closedloop.json"


class BaseAgent(ABC):
    """One pipeline stage: reads the shared state and its input artifacts, writes its own."""

    def __init__(self, name: str):
        self.name = name

    @abstractmethod
    def execute(self, state: Dict[str, Any]) -> Dict[str, Any]:
        """Execute agent logic. Must be implemented by subclasses."""
        pass

    def store(self, state: Dict[str, Any]) -> ArtifactStore:
        if state.get("artifact_store") is None:
            state["artifact_store"] = ArtifactStore(state.get("output_dir"))
        return state["artifact_store"]

    def resolve(self, state: Dict[str, Any]) -> ResolvedPipeline:
        """Benchmark objects for the run config, built once per state."""
        if state.get("resolved") is None:
            config: PipelineConfig = state["pipeline_config"]
            state["resolved"] = config.resolve()
        return state["resolved"]

    def load_artifact(self, state: Dict[str, Any], key: str, name: str) -> Optional[Dict[str, Any]]:
        """Prefer the result already in state, else read it from the output directory."""
        if state.get(key):
            return state[key]
        store = self.store(state)
        if not store.exists(name):
            return None
        state[key] = store.read_json(name)
        return state[key]

    def record_gates(self, state: Dict[str, Any], **gates: Optional[bool]):
        state.setdefault("gates", {}).update(gates)

    def log_action(self, action: str, details: Dict[str, Any]):
        """Log agent action for observability."""
        logger.info(f"[{self.name}] {action}: {details}")
