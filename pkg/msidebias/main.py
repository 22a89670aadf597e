import argparse
import json
import logging
import sys
from typing import List, Optional

from dotenv import load_dotenv

from msidebias.api import commands
from msidebias.core.errors import ConfigError, MissingArtifactError, MsiDebiasError

# Load environment variables
load_dotenv()

# Set up logging
logger = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    """Argument errors surface as ConfigError so they get the JSON error line too"""

    def error(self, message: str):
        raise ConfigError(message, field="argv")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="msidebias", description="Multiple-bias-rejecting MSI classifier experiments")
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--out", help="Output directory")
        p.add_argument("--seed", type=int, help="Global seed (overrides every section seed)")

    p = sub.add_parser("synth", help="Generate a synthetic cohort")
    common(p)
    p.add_argument("--write-spots", action="store_true", help="Also write spot images for 'preprocess'")

    p = sub.add_parser("preprocess", help="Tile a directory of spot images")
    p.add_argument("spot_dir")
    common(p)

    p = sub.add_parser("audit", help="Distance-correlation audit of one checkpoint")
    p.add_argument("cohort_dir")
    p.add_argument("--checkpoint", required=True)
    common(p)

    p = sub.add_parser("train", help="Cross-validated baseline or bias-ablated training")
    p.add_argument("cohort_dir")
    common(p)
    p.add_argument("--ablate", action="store_true", help="Train the bias-ablated model")
    p.add_argument("--folds", type=int, help="Cross-validation folds")
    p.add_argument("--lambda", dest="lambda_", type=float, help="Adversarial weight")

    p = sub.add_parser("eval", help="Evaluate the validation folds of a run")
    p.add_argument("run_dir")
    p.add_argument("cohort_dir")
    p.add_argument("--prevalence", type=float, help="Reporting MSI-H prevalence")
    p.add_argument("--out", help="Output directory (defaults to the run directory)")

    p = sub.add_parser("report", help="Compare evaluated runs against the first one")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", help="Output directory")
    return parser


def _config(args: argparse.Namespace):
    return commands.load_run_config(getattr(args, "config", None), {
        "seed": getattr(args, "seed", None),
        "out": getattr(args, "out", None),
        "train.folds": getattr(args, "folds", None),
        "train.lambda": getattr(args, "lambda_", None),
    })


def dispatch(args: argparse.Namespace) -> None:
    if args.command == "synth":
        commands.cmd_synth(_config(args), args.out, args.write_spots)
    elif args.command == "preprocess":
        commands.cmd_preprocess(args.spot_dir, _config(args), args.out)
    elif args.command == "audit":
        commands.cmd_audit(args.cohort_dir, args.checkpoint, _config(args), args.out)
    elif args.command == "train":
        commands.cmd_train(args.cohort_dir, _config(args), args.ablate, args.out)
    elif args.command == "eval":
        if args.prevalence is not None and not 0.0 <= args.prevalence <= 1.0:
            raise ConfigError(f"--prevalence {args.prevalence} outside [0, 1]", field="metrics.prevalence")
        commands.cmd_eval(args.run_dir, args.cohort_dir, args.prevalence, args.out)
    elif args.command == "report":
        commands.cmd_report(args.run_dirs, args.out)


def run(argv: Optional[List[str]] = None) -> int:
    """Parse, run one command and return its exit code"""
    command = "msidebias"
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        if args.verbose:
            logging.getLogger().setLevel(logging.DEBUG)
        dispatch(args)
        return 0
    except MsiDebiasError as e:
        logger.error(f"{command} failed: {e.message}")
        error = e
    except OSError as e:
        logger.exception(f"{command} failed on I/O")
        error = MissingArtifactError(str(e))
    sys.stderr.write(json.dumps(error.to_payload(), sort_keys=True, default=str) + "\n")
    return error.exit_code
