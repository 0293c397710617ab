import logging
import os

import aiofiles
import jinja2

from config import Config
from util.errors import FatalIOError
from utils.helpers import format_bytes

logger = logging.getLogger(__name__)


def _pct(value):
    return "n/a" if value is None else f"{100.0 * value:.2f}"


async def render_report(template_name: str, **context) -> str:
    """Renders template/<template_name> with the report context."""
    path = os.path.join(Config.TEMPLATE_DIR, template_name)
    try:
        async with aiofiles.open(path, 'r') as f:
            template_content = await f.read()
    except FileNotFoundError:
        logger.error(f"report template {template_name} not found in {Config.TEMPLATE_DIR}")
        raise FatalIOError(f"report template {path} is missing", path=path)

    env = jinja2.Environment(undefined=jinja2.StrictUndefined, trim_blocks=True, lstrip_blocks=True)
    env.filters["pct"] = _pct
    env.filters["bytes"] = format_bytes
    return env.from_string(template_content).render(**context)


async def write_report(out_dir: str, template_name: str, **context) -> str:
    text = await render_report(template_name, **context)
    path = os.path.join(out_dir, "report.md")
    async with aiofiles.open(path, 'w') as f:
        await f.write(text)
    logger.info(f"report written to {path}")
    return path
