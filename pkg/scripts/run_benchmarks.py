"""Run the full pipeline for every benchmark config and summarize the outcomes."""
import sys
from pathlib import Path

# Add project root to Python path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

import logging
from agents.orchestrator import PipelineOrchestrator
from config.pipeline import load_config
from models.exceptions import ConfigurationError

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


def run_benchmarks(config_dir: Path) -> int:
    """Run every *.json in config_dir; returns the number of runs that ended in an error."""
    paths = sorted(config_dir.glob("*.json"))
    logger.info(f"Running {len(paths)} benchmark configs from {config_dir}")

    orchestrator = PipelineOrchestrator()
    outcomes = {}
    for path in paths:
        try:
            config = load_config(str(path))
        except ConfigurationError as e:
            logger.warning(f"!! {path.name}: {e}")
            outcomes[path.name] = "failed"
            continue
        state = orchestrator.run_pipeline(config)
        outcomes[path.name] = state.get("status", "failed")
        logger.info(f"{path.name}: {outcomes[path.name]}")
        if state.get("report"):
            logger.info("\n" + state["report"])

    logger.info("")
    for name, status in outcomes.items():
        logger.info(f"  {name:<24} {status}")
    return sum(status == "failed" for status in outcomes.values())


if __name__ == "__main__":
    directory = Path(sys.argv[1]) if len(sys.argv) > 1 else project_root / "configs"
    sys.exit(1 if run_benchmarks(directory) else 0)
