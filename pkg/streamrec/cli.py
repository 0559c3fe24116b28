"""Command line entry point: one subcommand per pipeline stage."""
import argparse
import logging
import sys
from typing import Any
from typing import Callable
from typing import Dict
from typing import List
from typing import NoReturn
from typing import Optional
from typing import Sequence

from streamrec import pipeline
from streamrec.config import PipelineConfig
from streamrec.config import parse_config
from streamrec.errors import EXIT_OK
from streamrec.errors import EXIT_USAGE
from streamrec.errors import InvalidConfig
from streamrec.errors import StreamRecError
from streamrec.pipeline import Artifacts
from streamrec.retrieval import VARIANTS

logger = logging.getLogger("streamrec")

_RECORD_FIELDS = frozenset(vars(logging.makeLogRecord({})))


class UsageError(Exception):
    pass


class KeyValueFormatter(logging.Formatter):
    """``LEVEL event key=value ...`` with the fields passed through ``extra``."""

    def format(self, record: logging.LogRecord) -> str:
        fields = {
            key: value
            for key, value in vars(record).items()
            if key not in _RECORD_FIELDS and not key.startswith("_")
        }
        parts = [record.levelname, record.getMessage()]
        parts += [f"{key}={value}" for key, value in fields.items()]
        line = " ".join(parts)
        if record.exc_info:
            line += "\n" + self.formatException(record.exc_info)
        return line


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        raise UsageError(message)


def _add_common(parser: argparse.ArgumentParser, top: bool) -> None:
    # Subcommand copies must not reset values given before the subcommand.
    none = None if top else argparse.SUPPRESS
    parser.add_argument(
        "--config", metavar="PATH", default=none, help="TOML configuration file"
    )
    parser.add_argument("--seed", type=int, default=none, help="override pipeline.seed")
    parser.add_argument(
        "--out", metavar="DIR", default=none, help="override pipeline.out_dir"
    )
    parser.add_argument(
        "--quiet",
        action="store_true",
        default=False if top else argparse.SUPPRESS,
        help="only log warnings and errors",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="streamrec",
        description="Simulate a live-streaming platform and train recommenders on it.",
    )
    _add_common(parser, top=True)
    sub = parser.add_subparsers(
        dest="command", metavar="COMMAND", parser_class=_Parser
    )

    def add(
        name: str, summary: str, variants: Sequence[str] = ()
    ) -> argparse.ArgumentParser:
        cmd = sub.add_parser(name, help=summary)
        _add_common(cmd, top=False)
        if variants:
            cmd.add_argument(
                "--variant",
                action="append",
                choices=list(variants),
                help="restrict to this variant (repeatable)",
            )
        return cmd

    add("simulate", "generate the world, windows and interaction logs")
    add("train-retrieval", "train two-tower retrieval variants", VARIANTS)
    add("eval-retrieval", "hit rate of trained retrieval variants", VARIANTS)
    add("build-codebooks", "fit residual codebooks on raw and fused embeddings")
    add("quantize", "attach semantic codes to the train and eval logs")
    ranking = pipeline.RANKING_VARIANTS
    add("train-ranking", "train the multi-task ranking model", ranking)
    add("eval-ranking", "AUC and GAUC per task", ranking)
    add("report", "collect metrics of earlier stages into a report")
    add("run", "run every stage in order")
    cmd = add("neighbors", "closest authors in a retrieval index", VARIANTS)
    cmd.add_argument("--author", type=int, required=True, help="author id")
    cmd.add_argument("--k", type=int, default=10, help="number of neighbours")
    return parser


def configure_logging(quiet: bool = False) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(KeyValueFormatter())
    logger.handlers[:] = [handler]
    logger.setLevel(logging.WARNING if quiet else logging.INFO)


def load_config(args: argparse.Namespace) -> PipelineConfig:
    try:
        config = parse_config(args.config)
    except OSError as exc:
        reason = exc.strerror or str(exc)
        raise InvalidConfig(f"Cannot read config {args.config}: {reason}") from exc
    return config.with_overrides(seed=args.seed, out_dir=args.out).validate()


def _print_report(report: pipeline.RunReport) -> None:
    print(report.render())


def _run(args: argparse.Namespace) -> int:
    if args.command is None:
        raise UsageError("a command is required")
    config = load_config(args)
    art = Artifacts(config)
    variants: Optional[List[str]] = getattr(args, "variant", None)
    command = args.command
    stages: Dict[str, Callable[[], Any]] = {
        "simulate": lambda: pipeline.stage_simulate(config, art),
        "train-retrieval": lambda: pipeline.stage_train_retrieval(
            config, art, variants or pipeline.BASE_RETRIEVAL_VARIANTS
        ),
        "eval-retrieval": lambda: pipeline.stage_eval_retrieval(config, art, variants),
        "build-codebooks": lambda: pipeline.stage_build_codebooks(config, art),
        "quantize": lambda: pipeline.stage_quantize(config, art),
        "train-ranking": lambda: pipeline.stage_train_ranking(
            config, art, variants or pipeline.RANKING_VARIANTS
        ),
        "eval-ranking": lambda: pipeline.stage_eval_ranking(
            config, art, variants or pipeline.RANKING_VARIANTS
        ),
    }
    if command in stages:
        result = pipeline.run_stage(command, stages[command])
        if isinstance(result, dict):
            for key, value in result.items():
                logger.info("metric", extra={"key": key, "value": value})
        return EXIT_OK
    if command == "report":
        _print_report(pipeline.stage_report(config, art))
        return EXIT_OK
    if command == "run":
        _print_report(pipeline.run_pipeline(config))
        return EXIT_OK
    if command == "neighbors":
        variant = variants[-1] if variants else "fusion"
        for author, score in pipeline.neighbors(art, args.author, args.k, variant):
            print(f"{author}\t{score:.6f}")
        return EXIT_OK
    raise UsageError(f"unknown command {command!r}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run the command line and return its exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"streamrec: error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    configure_logging(args.quiet)
    try:
        return _run(args)
    except UsageError as exc:
        print(f"streamrec: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StreamRecError as exc:
        logger.error("streamrec.failed", extra={"error": type(exc).__name__})
        print(f"streamrec: error: {exc}", file=sys.stderr)
        return exc.exit_code
