"""
Command-line entry point: ``python -m app.main <command> [flags]``

Exit codes: 0 success, 1 configuration error, 2 divergence, 3 I/O error.
"""
import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional

from .commands.bound import bound_arguments, check_bound
from .commands.costs import compute_costs
from .commands.generate import generate_dataset
from .commands.run import run_experiment, run_kind
from .config import ExperimentConfig, load_config, parse_config
from .errors import TwinError

logger = logging.getLogger(__name__)

LOG_ENV = "TWIN_LOG"
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def configure_logging() -> None:
    name = os.environ.get(LOG_ENV, "info").strip().lower()
    logging.basicConfig(
        level=LOG_LEVELS.get(name, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    if name not in LOG_LEVELS:
        logger.warning(f"Unknown {LOG_ENV} value {name!r}; using info")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="twin",
        description="Multi-modal twin mapping, transformation and cost experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def experiment_flags(p: argparse.ArgumentParser, config_required: bool = True):
        p.add_argument("--config", required=config_required, help="experiment config or run manifest (JSON)")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, help="single seed for world and run (overrides config)")
        p.add_argument("--threads", type=int, help="concurrent areas per round")
        p.add_argument("--mode", choices=["unified", "specific"], help="twin training mode")

    experiment_flags(sub.add_parser("generate", help="write the synthetic dataset"))
    experiment_flags(sub.add_parser("run", help="map, transform and evaluate every configured op"))
    for kind in ("transfer", "merge", "split"):
        p = sub.add_parser(kind, help=f"run only {kind} ops")
        experiment_flags(p)
        p.add_argument("--op", action="append", help="op in arrow notation, e.g. V->W (repeatable)")
    experiment_flags(sub.add_parser("costs", help="federated vs centralized cost ledgers"))

    bound = sub.add_parser("check-bound", help="evaluate the local step-size bound")
    bound.add_argument("--config", help="take unset values from this config")
    bound.add_argument("--G", type=float)
    bound.add_argument("--L", type=float)
    bound.add_argument("--mu", type=float)
    bound.add_argument("--beta", type=int)
    bound.add_argument("--eta", type=float)
    bound.add_argument("--eta-l", dest="eta_l", type=float)

    sub.add_parser("schema", help="print the config JSON schema")
    return parser


def apply_overrides(config: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    """Re-validate the config with command-line overrides applied"""
    data = config.model_dump(mode="json")
    if getattr(args, "seed", None) is not None:
        data["seeds"] = [args.seed]
        data["world"]["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        data["threads"] = args.threads
    if getattr(args, "mode", None) is not None:
        data["mode"] = args.mode
    if getattr(args, "out", None):
        data["output_dir"] = args.out
    return parse_config(data)


def dispatch(args: argparse.Namespace) -> Dict[str, Any]:
    if args.command == "schema":
        return {"status": "success", "exit_code": 0, "schema": ExperimentConfig.model_json_schema()}
    if args.command == "check-bound":
        config = load_config(args.config) if args.config else None
        values = bound_arguments(config, {
            "G": args.G, "L": args.L, "mu": args.mu, "beta": args.beta, "eta": args.eta, "eta_l": args.eta_l,
        })
        return check_bound(*values)

    config = apply_overrides(load_config(args.config), args)
    out_dir = config.output_dir
    if args.command == "generate":
        return generate_dataset(config, out_dir)
    if args.command == "run":
        return run_experiment(config, out_dir)
    if args.command == "costs":
        return compute_costs(config, out_dir)
    return run_kind(config, out_dir, args.command, args.op)


def main(argv: Optional[List[str]] = None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        result = dispatch(args)
    except TwinError as e:
        logger.error(f"{args.command} failed: {e}")
        result = {"status": "error", "exit_code": e.exit_code, "message": str(e)}
    print(json.dumps(result, indent=2, default=str))
    return int(result.get("exit_code", 0))


if __name__ == "__main__":
    sys.exit(main())
