# database/store.py

"""
On-disk persistence: JSONL manifests, JSON documents, CSV curves and the
versioned binary checkpoint format.

Checkpoint layout (all integers little-endian):

    8 bytes   magic b"MSEGCKPT"
    u32       format version (1)
    u64       training step
    u32       metadata length L, then L bytes of UTF-8 JSON
    u32       tensor count N, then N records of
                u16 name length, name (UTF-8)
                u8  dtype code (1 = float64)
                u8  rank R, then R x u32 dims
                prod(dims) x 8 bytes, row-major
"""

import csv
import json
import logging
import os
import struct

import numpy as np

from util.errors import FatalIOError, ValidationError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MSEGCKPT"
CHECKPOINT_VERSION = 1
_DTYPES = {1: np.dtype("<f8")}


def ensure_dir(path: str) -> str:
    """Creates `path` if needed and checks that it is writable; an unusable directory is fatal."""
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise FatalIOError(f"cannot create output directory {path}: {e}", path=path)
    if not os.access(path, os.W_OK):
        raise FatalIOError(f"output directory {path} is not writable", path=path)
    return path


def _atomic_write(path: str, data: bytes):
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except OSError as e:
        raise FatalIOError(f"could not write {path}: {e}", path=path)


def write_json(path: str, obj) -> str:
    _atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n").encode("utf-8"))
    return path


def read_json(path: str):
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise ValidationError(f"file not found: {path}", path=path)
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path} is not valid JSON: {e}", path=path)


def read_jsonl(path: str) -> list[dict]:
    """One JSON object per non-blank line; the line number is reported on errors."""
    rows = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as e:
                    raise ValidationError(f"{path}:{lineno}: invalid JSON ({e.msg})", path=path, line=lineno)
                if not isinstance(row, dict):
                    raise ValidationError(f"{path}:{lineno}: expected an object", path=path, line=lineno)
                rows.append(row)
    except FileNotFoundError:
        raise ValidationError(f"manifest not found: {path}", path=path)
    return rows


def write_jsonl(path: str, rows) -> str:
    body = "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)
    _atomic_write(path, body.encode("utf-8"))
    return path


def read_lines(path: str) -> list[str]:
    """Index files: one id per line, blank lines skipped."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            return [line.strip() for line in f if line.strip()]
    except FileNotFoundError:
        raise ValidationError(f"index file not found: {path}", path=path)


def write_csv(path: str, header: list[str], rows) -> str:
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            for row in rows:
                writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
        os.replace(tmp, path)
    except OSError as e:
        raise FatalIOError(f"could not write {path}: {e}", path=path)
    return path


def save_checkpoint(path: str, params: dict, step: int = 0, meta: dict | None = None) -> str:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<IQI", CHECKPOINT_VERSION, step, len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<BB", 1, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    _atomic_write(path, b"".join(parts))
    logger.debug(f"checkpoint written to {path} (step {step}, {len(params)} tensors)")
    return path


def load_checkpoint(path: str) -> tuple[dict, int, dict]:
    """Returns (params, step, metadata)."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except FileNotFoundError:
        raise ValidationError(f"checkpoint not found: {path}", path=path)
    try:
        if data[:8] != CHECKPOINT_MAGIC:
            raise ValidationError(f"{path} is not a checkpoint (bad magic)", path=path)
        version, step, meta_len = struct.unpack_from("<IQI", data, 8)
        if version != CHECKPOINT_VERSION:
            raise ValidationError(f"unsupported checkpoint version {version}", path=path)
        pos = 8 + struct.calcsize("<IQI")
        meta = json.loads(data[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        params = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + name_len].decode("utf-8")
            pos += name_len
            code, ndim = struct.unpack_from("<BB", data, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            dtype = _DTYPES.get(code)
            if dtype is None:
                raise ValidationError(f"unknown dtype code {code} in {path}", path=path)
            n = int(np.prod(shape)) if ndim else 1
            params[name] = np.frombuffer(data, dtype=dtype, count=n, offset=pos).reshape(shape).astype(np.float64)
            pos += n * dtype.itemsize
    except (struct.error, ValueError) as e:
        raise ValidationError(f"{path} is truncated: {e}", path=path)
    return params, step, meta
