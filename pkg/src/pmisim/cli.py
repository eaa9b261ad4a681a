import argparse
import os
import sys
from typing import Dict, List, Optional

from .config import AGENT_KINDS, ExperimentConfig, load_config, parse_override
from .errors import CheckpointError, ConfigError, PmisimError, TrainingDivergedError
from .harness import COMPARED_AGENTS, compare, dump_codebook, evaluate, train
from .log import configure_logging, get_logger

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ABORT = 3


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON or YAML experiment config")
    parser.add_argument("--agent", choices=AGENT_KINDS)
    parser.add_argument("--seed", type=int, help="experiment and scenario seed")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--episodes", type=int)
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override any config key, e.g. scenario.num_sites=19",
    )
    parser.add_argument("--log-level", default="INFO")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pmisim",
        description="Multi-cell PMI control simulator with xApp agents.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="evaluate one agent")
    _add_common(run)
    run.add_argument("--checkpoint")

    commands_train = commands.add_parser("train", help="train an RL agent")
    _add_common(commands_train)

    ev = commands.add_parser("eval", help="evaluate a trained agent")
    _add_common(ev)
    ev.add_argument("--checkpoint")

    cmp_ = commands.add_parser("compare", help="compare the three agents")
    _add_common(cmp_)

    dump = commands.add_parser("dump-codebook", help="write the codebook as CSV")
    _add_common(dump)
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """File keys first, then dedicated flags, then --set overrides."""
    overrides: Dict[str, object] = {}
    if args.agent:
        overrides["agent"] = args.agent
    if args.seed is not None:
        overrides["seed"] = args.seed
        overrides["scenario.seed"] = args.seed
    if args.out:
        overrides["out_dir"] = args.out
    if args.episodes is not None:
        key = "episodes" if args.command in ("train", "compare") else "eval_episodes"
        overrides[key] = args.episodes
    for text in args.overrides:
        key, value = parse_override(text)
        overrides[key] = value
    return load_config(args.config, overrides)


def _compare_configs(cfg: ExperimentConfig) -> Dict[str, ExperimentConfig]:
    return {kind: cfg.model_copy(update={"agent": kind}) for kind in COMPARED_AGENTS}


def dispatch(args: argparse.Namespace) -> None:
    cfg = resolve_config(args)
    if args.command == "run":
        evaluate(cfg, args.checkpoint, require_checkpoint=False)
    elif args.command == "train":
        train(cfg)
    elif args.command == "eval":
        evaluate(cfg, args.checkpoint)
    elif args.command == "compare":
        compare(_compare_configs(cfg), cfg.out_dir)
    elif args.command == "dump-codebook":
        os.makedirs(cfg.out_dir, exist_ok=True)
        path = os.path.join(cfg.out_dir, "codebook.csv")
        count = dump_codebook(cfg, path)
        logger.info("Wrote %d codebook entries to %s", count, path)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        configure_logging(args.log_level)
    except ValueError as exc:
        print(f"pmisim: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        dispatch(args)
    except (ConfigError, CheckpointError) as exc:
        logger.error("Configuration error: %s", exc)
        return EXIT_CONFIG
    except (TrainingDivergedError, PmisimError) as exc:
        logger.error("Run aborted: %s", exc)
        return EXIT_ABORT
    return EXIT_OK
