"""Pipeline stage agents and their LangGraph orchestrator."""
from .orchestrator import PipelineOrchestrator, exit_code
from .training_agent import TrainingAgent
from .certification_agent import CertificationAgent
from .simulation_agent import SimulationAgent
from .report_agent import ReportAgent

__all__ = [
    "PipelineOrchestrator",
    "exit_code",
    "TrainingAgent",
    "CertificationAgent",
    "SimulationAgent",
    "ReportAgent"
]
