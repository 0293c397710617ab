# matseg.py

import argparse
import asyncio
import json
import logging
import os
import sys

from config import Config
from database.store import ensure_dir
from handlers import load_handlers
from util.errors import ToolkitError, ValidationError

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


class UsageError(ValidationError):
    pass


class ArgumentParser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so usage errors map to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="matseg", description="Material segmentation training-recipe toolkit")
    parser.add_argument("--version", action="store_true", help="print toolkit and config schema versions")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=ArgumentParser)
    for name, cmd in sorted(load_handlers().items()):
        cmd.configure(sub.add_parser(name, help=cmd.help, description=cmd.help))
    return parser


def setup_logging(out_dir: str | None, verbose: bool = False, quiet: bool = False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else getattr(logging, Config.LOG_LEVEL.upper(), logging.INFO)
    handlers = [logging.StreamHandler()]
    if out_dir:
        handlers.insert(0, logging.FileHandler(os.path.join(out_dir, "run.log")))
    logging.basicConfig(level=level, format=LOG_FORMAT, handlers=handlers, force=True)
    logging.getLogger("aiohttp").setLevel(logging.WARNING)
    logging.getLogger("PIL").setLevel(logging.WARNING)
    logging.getLogger("asyncio").setLevel(logging.WARNING)


def write_failure(out_dir: str | None, error: Exception, exit_code: int):
    doc = {
        "error": str(error),
        "type": type(error).__name__,
        "exit_code": exit_code,
        "details": getattr(error, "details", {}),
    }
    text = json.dumps(doc, indent=2, sort_keys=True, default=str)
    if out_dir and os.path.isdir(out_dir):
        try:
            with open(os.path.join(out_dir, "failure.json"), "w", encoding="utf-8") as f:
                f.write(text + "\n")
            return
        except OSError:
            pass
    print(text, file=sys.stderr)


def dispatch(argv) -> int:
    """Runs one subcommand. 0 ok, 1 invalid input, 2 runtime failure, 3 check failed."""
    out_dir = None
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        if args.version:
            print(f"matseg {Config.TOOLKIT_VERSION} (config schema {Config.CONFIG_SCHEMA_VERSION})")
            return 0
        if not args.command:
            parser.print_help(sys.stderr)
            raise UsageError("no subcommand given")
        if args.out:
            out_dir = ensure_dir(args.out)
        setup_logging(out_dir, args.verbose, args.quiet)
        logger.info(f"matseg {Config.TOOLKIT_VERSION}: {args.command}")
        asyncio.run(load_handlers()[args.command].run(args))
        return 0
    except ToolkitError as e:
        logger.error(f"{type(e).__name__}: {e}")
        write_failure(out_dir, e, e.exit_code)
        return e.exit_code
    except Exception as e:
        logger.exception(f"unexpected failure: {e}")
        write_failure(out_dir, e, 2)
        return 2


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
