# -----------------------------
# Import required libraries
# -----------------------------
import argparse
import logging
import sys

# Run-level defaults and choices shown in --help
from config.settings import MODES, VERIFY_SUITES, EXIT_CODES

# Command implementations:
# - cmd_train(): one training run per seed + manifest
# - cmd_verify(): randomized property suites
# - cmd_export_curves(): tidy return curves for external plotting
# - cmd_eval(): greedy evaluation of a checkpoint
from components.experiment import cmd_train, cmd_verify, cmd_export_curves, cmd_eval

# Logging setup shared by every command
from utils.helpers import configure_logging, fan_out_seeds
from utils.data import parse_config, config_from_text
from utils.errors import SprigError

logger = logging.getLogger(__name__)


# -----------------------------
# Seed list parsing
# -----------------------------
def parse_seeds(text):
    """'0,1,2' -> [0, 1, 2]"""
    try:
        return [int(part) for part in text.split(',') if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got '{text}'")


# -----------------------------
# Argument parser
# -----------------------------
def build_parser():
    parser = argparse.ArgumentParser(
        prog="sprig",
        description="Perception/policy Stackelberg training on PPO, plus its verification suites.",
    )
    parser.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    commands = parser.add_subparsers(dest="command", required=True)

    # train: one run per seed
    train = commands.add_parser("train", help="train one run per seed")
    train.add_argument("--config", help="key = value config file (missing keys take defaults)")
    seeds = train.add_mutually_exclusive_group()
    seeds.add_argument("--seeds", type=parse_seeds, help="comma-separated seeds, e.g. 0,1,2")
    seeds.add_argument("--num-seeds", type=int,
                       help="N runs seeded master + 0 .. master + N-1 (master = config seed)")
    train.add_argument("--mode", choices=MODES, help="override the config mode")
    train.add_argument("--out", help="output root (overrides output_dir)")
    train.add_argument("--workers", type=int, default=1, help="parallel seed processes")

    # verify: property suites
    verify = commands.add_parser("verify", help="run the property suites")
    verify.add_argument("--suite", choices=VERIFY_SUITES, default="all")

    # export-curves: tidy CSV for plotting
    export = commands.add_parser("export-curves", help="aggregate metrics CSVs into return curves")
    export.add_argument("metrics", nargs="+", help="per-seed metrics.csv files")
    export.add_argument("--out", required=True, help="output CSV path")

    # eval: greedy play from a checkpoint
    evaluate = commands.add_parser("eval", help="greedy evaluation of a checkpoint")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--episodes", type=int, default=10)
    evaluate.add_argument("--seed", type=int, default=0)

    return parser


# -----------------------------
# Command routing
# -----------------------------
def main(argv=None):
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)

    if args.command == "train":
        seeds = args.seeds
        if args.num_seeds is not None:
            if args.num_seeds < 1:
                logger.error("config error: --num-seeds must be >= 1")
                return EXIT_CODES['config_error']
            # master seed comes from the config file, fanned out per run
            try:
                master = (parse_config(args.config) if args.config else config_from_text("")).seed
            except (SprigError, OSError) as exc:
                logger.error("config error: %s", exc)
                return EXIT_CODES['config_error']
            seeds = fan_out_seeds(master, args.num_seeds)
        return cmd_train(args.config, seeds=seeds, mode=args.mode, out=args.out,
                         workers=args.workers, log_level=args.log_level)

    if args.command == "verify":
        return cmd_verify(args.suite)

    if args.command == "export-curves":
        return cmd_export_curves(args.metrics, args.out)

    return cmd_eval(args.checkpoint, episodes=args.episodes, seed=args.seed)


if __name__ == "__main__":
    sys.exit(main())
