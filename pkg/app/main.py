import argparse
import logging
import sys

from pydantic import ValidationError

from app.cli.commands import COMMANDS, build_parser, dry_run_text, request_flags
from app.cli.config import ConfigError, resolve_request
from app.clients.artifacts import ArtifactError
from app.core.settings import settings
from app.services.allocation import AllocationError
from app.services.experiments import ExperimentError
from app.services.manifolds import ManifoldError
from app.services.runs import RunError, finish_run, open_run
from app.services.sae import SaeError
from app.services.theory import TheoryError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

RUNTIME_ERRORS = (
    AllocationError,
    ArtifactError,
    ExperimentError,
    ManifoldError,
    RunError,
    SaeError,
    TheoryError,
)


def configure_logging() -> None:
    logging.basicConfig(
        level=settings.log_level,
        format="%(asctime)s %(levelname)s [%(name)s] %(message)s",
        stream=sys.stderr,
    )


def execute(parser: argparse.ArgumentParser, args: argparse.Namespace) -> int:
    command = COMMANDS[args.command]
    try:
        request = resolve_request(command.request, request_flags(args), getattr(args, "config", None))
    except ConfigError as exc:
        if exc.missing:
            print(parser.format_usage().rstrip(), file=sys.stderr)
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    if getattr(args, "dry_run", False):
        print(dry_run_text(request))
        return EXIT_OK

    config = request.model_dump(mode="json")
    context = open_run(command.name, config, request.seed, request.out_dir, getattr(request, "resume", None))
    status = "failed"
    try:
        summary = command.handler(request, context)
        status = "ok"
    finally:
        finish_run(context, status)
        logger.info("cli_command_finished command=%s status=%s run_dir=%s", command.name, status, context.run_dir)
    print(summary)
    print(f"run_dir={context.run_dir}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return execute(parser, args)
    except ValidationError as exc:
        error = exc.errors()[0]
        field = ".".join(str(part) for part in error.get("loc", ())) or "<root>"
        print(f"config error: <command line>: {field}: {error.get('msg')}", file=sys.stderr)
        return EXIT_USAGE
    except RUNTIME_ERRORS as exc:
        logger.info("cli_command_failed command=%s error=%s", args.command, type(exc).__name__)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
