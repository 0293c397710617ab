# handlers/__init__.py

"""
Subcommand plugins. Every module in this package registers its subcommands
with @command; matseg.py imports them all through load_handlers().
"""

import importlib
import logging
import os
import pkgutil
from dataclasses import dataclass, field

from config import Config
from database.store import write_json

logger = logging.getLogger(__name__)

COMMANDS = {}


def arg(*flags, **kwargs):
    return flags, kwargs


@dataclass
class Command:
    name: str
    help: str
    run: object
    arguments: list = field(default_factory=list)
    needs_out: bool = True

    def configure(self, parser):
        if self.needs_out:
            parser.add_argument("--out", required=True, help="output directory (nothing is written outside it)")
        else:
            parser.add_argument("--out", default=None, help="optional output directory")
        parser.add_argument("--seed", type=int, default=None, help=f"global seed (default {Config.SEED})")
        for flags, kwargs in self.arguments:
            parser.add_argument(*flags, **kwargs)


def command(name: str, help: str = "", arguments=(), needs_out: bool = True):
    """Registers an async handler `run(args) -> None` as a subcommand."""
    def decorator(func):
        if name in COMMANDS:
            raise RuntimeError(f"subcommand {name!r} registered twice")
        COMMANDS[name] = Command(name, help, func, list(arguments), needs_out)
        return func
    return decorator


def load_handlers() -> dict:
    for module in pkgutil.iter_modules(__path__):
        importlib.import_module(f"{__name__}.{module.name}")
    return COMMANDS


def seed_of(args) -> int:
    return Config.SEED if args.seed is None else args.seed


def write_resolved_config(args, config: dict) -> str | None:
    """Snapshot of everything that determines this run's outputs, all defaults materialized."""
    if not args.out:
        return None
    snapshot = {
        "command": args.command,
        "toolkit_version": Config.TOOLKIT_VERSION,
        "schema_version": Config.CONFIG_SCHEMA_VERSION,
        "seed": seed_of(args),
        "config": config,
    }
    return write_json(os.path.join(args.out, "resolved_config.json"), snapshot)


def resolve_path(base_file: str, path: str) -> str:
    """Manifest paths are relative to the manifest's own directory."""
    return path if os.path.isabs(path) else os.path.join(os.path.dirname(os.path.abspath(base_file)), path)
