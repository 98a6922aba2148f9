"""Command-line entry point: ``python -m noiselens <subcommand> ...``."""
import argparse
import logging

from noiselens.cli.commands import COMMANDS
from noiselens.cli.error_handlers import EXIT_OK, UsageError, handle_error
from noiselens.config import get_config
from noiselens.utils.logger import configure_logging, log_operation

logger = logging.getLogger(__name__)


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common_options():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="Seed for all randomness")
    common.add_argument("--config", default=None, help="Run config (JSON)")
    common.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
    common.add_argument("--log-dir", default=None, help="Directory for the rotating log file")
    return common


def build_parser():
    common = _common_options()
    parser = ArgumentParser(prog="noiselens", description="Sensor-noise GAN toolkit for space-object detection")
    subparsers = parser.add_subparsers(dest="command", metavar="command", parser_class=ArgumentParser)
    subparsers.required = True

    p = subparsers.add_parser("simulate", parents=[common], help="Render noiseless scenes with annotations")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--split", default="train", choices=("train", "validation", "test"))
    p.add_argument("--start", type=int, default=0, help="Index of the first scene")
    p.add_argument("--degrade", action="store_true", help="Also apply the configured sensor model")

    p = subparsers.add_parser("degrade", parents=[common], help="Apply the sensor noise model to images")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)

    p = subparsers.add_parser("blank", parents=[common], help="Build blank contexts from labeled images")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mean", type=float, default=None, help="Fill value; the dataset mean by default")

    p = subparsers.add_parser("train", parents=[common], help="Train satgan, pix2pix or a detector")
    p.add_argument("--out", required=True, help="Run directory")

    p = subparsers.add_parser("generate", parents=[common], help="Add generated noise to context images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--context-noise", action="store_true", help="Use z = c + w instead of a pure noise field")

    p = subparsers.add_parser("evaluate", parents=[common], help="Score a detector on a labeled dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--overlays", type=int, default=0, help="Write overlays for the first N images")
    p.add_argument("--contexts", default=None, help="Contexts of the evaluated images for a hallucination audit")

    p = subparsers.add_parser("report", parents=[common], help="Aggregate per-epoch metrics across runs")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)

    p = subparsers.add_parser("sim2real", parents=[common], help="Miniature sim2real comparison")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=None)
    return parser


def main(argv=None):
    """Parse ``argv``, run the subcommand and return its exit code."""
    args = None
    try:
        settings = get_config()
        args = build_parser().parse_args(argv)
        configure_logging(args.log_dir or settings.LOG_DIR, args.log_level or settings.LOG_LEVEL)
        details = COMMANDS[args.command](args, settings)
    except Exception as e:
        if args is not None and getattr(args, "out", None):
            log_operation(args.out, args.command, "failed", {"error": str(e), "type": type(e).__name__})
        return handle_error(e)
    log_operation(args.out, args.command, "success", details)
    return EXIT_OK
