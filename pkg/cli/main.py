"""Command-line entry point: train | certify | simulate | report | run."""
from typing import List, Optional
import argparse
import logging
import sys

from agents.orchestrator import EXIT_FAILED, PipelineOrchestrator, exit_code
from config.pipeline import load_config
from config.settings import settings
from models.exceptions import ConfigurationError

logger = logging.getLogger(__name__)

COMMANDS = ("train", "certify", "simulate", "report", "run")


def parse_state(text: str) -> List[float]:
    """'0.2,0.2,0,0' -> [0.2, 0.2, 0.0, 0.0]."""
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"x0 must be comma-separated numbers, got '{text}'") from e


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="avimpc",
        description="Train an MPC terminal cost by approximate value iteration and certify the horizon.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="pipeline JSON document (optional for 'report')")
    parser.add_argument("--x0", type=parse_state, action="append",
                        help="initial state as comma-separated values; repeat for several")
    parser.add_argument("--terminal", choices=("avi", "lqr"), help="terminal cost for 'simulate'")
    parser.add_argument("--out", help="output directory (default: config output_dir, then settings)")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=settings.log_level,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    config = None
    if args.config is not None:
        try:
            config = load_config(args.config)
        except ConfigurationError as e:
            logger.error(str(e))
            print(f"error: {e}", file=sys.stderr)
            return EXIT_FAILED
    elif args.command != "report":
        print(f"error: '{args.command}' needs --config", file=sys.stderr)
        return EXIT_FAILED

    orchestrator = PipelineOrchestrator()
    if args.command == "run":
        state = orchestrator.run_pipeline(config, args.out, args.x0, args.terminal)
    else:
        state = orchestrator.run_stage(args.command, config, args.out, args.x0, args.terminal)

    if state.get("report"):
        print(state["report"], end="")
    if state.get("refusal"):
        print(f"refused: {state['refusal']}", file=sys.stderr)
    if state.get("error"):
        print(f"error: {state['error']}", file=sys.stderr)
    return exit_code(state)


if __name__ == "__main__":
    sys.exit(main())
