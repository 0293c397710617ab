# utils/helpers.py

import asyncio
import hashlib
import logging

import numpy as np
from PIL import Image

from util.errors import ValidationError

logger = logging.getLogger(__name__)


def format_bytes(size):
    """Converts bytes to a human-readable format with custom rounding."""
    if not isinstance(size, (int, float)) or size == 0:
        return ""
    power = 1024
    n = 0
    power_labels = {0: 'B', 1: 'KB', 2: 'MB', 3: 'GB', 4: 'TB'}
    while size >= power and n < len(power_labels) - 1:
        size /= power
        n += 1
    if n >= 3: return f"{size:.1f} {power_labels[n]}"
    elif n == 2: return f"{round(size)} {power_labels[n]}"
    else: return f"{int(size)} {power_labels[n]}"


def format_rate(ok: int, total: int) -> str | None:
    """Recovery rate with one decimal, e.g. 41396/44560 -> '92.9%'. None when nothing was attempted."""
    if total == 0:
        return None
    return f"{100.0 * ok / total:.1f}%"


def stable_sample_id(sample_id) -> int:
    """Integer ids pass through; anything else maps to a stable 63-bit integer."""
    if isinstance(sample_id, (int, np.integer)):
        return int(sample_id)
    text = str(sample_id)
    if text.lstrip("-").isdigit():
        return int(text)
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big") >> 1


async def gather_in_executor(fn, items, max_workers: int | None = None):
    """Runs fn over items in the default thread pool; results keep the order of items."""
    loop = asyncio.get_running_loop()
    sem = asyncio.Semaphore(max_workers or len(items) or 1)

    async def run(item):
        async with sem:
            return await loop.run_in_executor(None, fn, item)

    return await asyncio.gather(*(run(i) for i in items))


def load_image(path: str) -> np.ndarray:
    """RGB file -> float32 (3, H, W) in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except FileNotFoundError:
        raise ValidationError(f"image not found: {path}", path=path)
    except OSError as e:
        raise ValidationError(f"cannot read image {path}: {e}", path=path)
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_mask(path: str) -> np.ndarray:
    """Single-channel label PNG -> int64 (H, W)."""
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P", "I", "I;16"):
                raise ValidationError(f"mask {path} must be single-channel, got mode {im.mode}", path=path)
            return np.asarray(im, dtype=np.int64).copy()
    except FileNotFoundError:
        raise ValidationError(f"mask not found: {path}", path=path)
    except OSError as e:
        raise ValidationError(f"cannot read mask {path}: {e}", path=path)


def save_image(path: str, image: np.ndarray):
    arr = np.clip(np.rint(image.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def save_mask(path: str, mask: np.ndarray):
    if mask.min() < 0 or mask.max() > 255:
        raise ValidationError(f"mask labels must fit in 8 bits to be saved as PNG, got [{mask.min()}, {mask.max()}]")
    Image.fromarray(mask.astype(np.uint8)).save(path)
