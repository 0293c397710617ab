# features/fetcher.py

"""
Manifest-driven dataset recovery over HTTP. Each entry ends in exactly one
outcome; the only fatal condition is an unusable output directory.

    404 / 410 / other 4xx / too many redirects  -> ExpiredUrl      (no retry)
    429 / 503                                   -> RateLimited     (retry, Retry-After honoured)
    other 5xx, timeout, connection/payload error -> NetworkFailure (retry with backoff)
    checksum mismatch                           -> Corrupt         (one re-download, then final)
"""

import asyncio
import hashlib
import logging
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from email.utils import parsedate_to_datetime
from enum import Enum

import aiofiles
import aiohttp
import numpy as np
from yarl import URL

from config import Config
from database.store import ensure_dir, read_jsonl
from util.errors import FatalIOError, ValidationError
from utils.helpers import format_bytes, format_rate

logger = logging.getLogger(__name__)

CHUNK_SIZE = 64 * 1024


class FetchStatus(str, Enum):
    OK = "Ok"
    EXPIRED = "ExpiredUrl"
    RATE_LIMITED = "RateLimited"
    NETWORK = "NetworkFailure"
    CORRUPT = "Corrupt"
    MISSING = "Missing"  # verify_local only


FETCH_STATUSES = [s for s in FetchStatus if s is not FetchStatus.MISSING]


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    url: str
    path: str
    sha256: str | None = None

    @classmethod
    def from_dict(cls, row: dict) -> "ManifestEntry":
        missing = [k for k in ("id", "url", "path") if k not in row]
        if missing:
            raise ValidationError(f"manifest entry {row!r} lacks {missing}")
        url = str(row["url"])
        parsed = URL(url)
        if parsed.scheme not in ("http", "https") or not parsed.host:
            raise ValidationError(f"entry {row['id']!r}: {url!r} is not an http(s) URL")
        path = str(row["path"])
        norm = os.path.normpath(path)
        if not path.strip() or norm == "." or path.endswith(("/", os.sep)):
            raise ValidationError(f"entry {row['id']!r}: path {path!r} does not name a file")
        if os.path.isabs(path) or norm == ".." or norm.startswith(".." + os.sep):
            raise ValidationError(f"entry {row['id']!r}: path {path!r} escapes the output directory")
        sha = row.get("sha256")
        if sha is not None and (len(sha) != 64 or any(c not in "0123456789abcdef" for c in sha.lower())):
            raise ValidationError(f"entry {row['id']!r}: sha256 must be 64 hex digits")
        return cls(str(row["id"]), url, norm, sha.lower() if sha else None)

    def to_dict(self) -> dict:
        out = {"id": self.sample_id, "url": self.url, "path": self.path}
        if self.sha256:
            out["sha256"] = self.sha256
        return out


def parse_manifest(rows) -> list[ManifestEntry]:
    entries = [ManifestEntry.from_dict(r) for r in rows]
    seen, paths = set(), {}
    for e in entries:
        if e.sample_id in seen:
            raise ValidationError(f"duplicate sample id {e.sample_id!r} in manifest")
        seen.add(e.sample_id)
        if e.path in paths:
            raise ValidationError(f"entries {paths[e.path]!r} and {e.sample_id!r} share the path {e.path!r}")
        paths[e.path] = e.sample_id
    return entries


def load_manifest(path: str) -> list[ManifestEntry]:
    return parse_manifest(read_jsonl(path))


@dataclass(frozen=True)
class FetchPolicy:
    max_attempts: int = Config.MAX_ATTEMPTS
    base_backoff: float = Config.BASE_BACKOFF
    jitter: float = 0.1
    max_parallel: int = Config.MAX_PARALLEL
    timeout: float = Config.REQUEST_TIMEOUT
    max_redirects: int = Config.MAX_REDIRECTS
    max_retry_after: float = 60.0

    def __post_init__(self):
        if self.max_attempts < 1 or self.max_parallel < 1:
            raise ValidationError("max_attempts and max_parallel must be >= 1")
        if self.base_backoff < 0 or self.jitter < 0 or self.timeout <= 0:
            raise ValidationError("backoff and jitter must be >= 0 and timeout > 0")

    def backoff(self, attempt: int, rng: np.random.Generator) -> float:
        """base * 2^(attempt-1), stretched by up to `jitter` of itself."""
        return self.base_backoff * 2 ** (attempt - 1) * (1.0 + self.jitter * float(rng.random()))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FetchOutcome:
    sample_id: str
    status: FetchStatus
    attempts: int
    bytes: int = 0
    final_http_code: int | None = None
    skipped: bool = False
    error: str | None = None

    def to_dict(self) -> dict:
        return {**asdict(self), "status": self.status.value}


@dataclass
class FetchReport:
    total: int
    counts: dict
    recovery_rate: float | None
    bytes_total: int
    failures: list = field(default_factory=list)

    @classmethod
    def from_outcomes(cls, outcomes: list[FetchOutcome], statuses=FETCH_STATUSES) -> "FetchReport":
        counts = {s.value: 0 for s in statuses}
        for o in outcomes:
            counts[o.status.value] = counts.get(o.status.value, 0) + 1
        total = len(outcomes)
        ok = counts.get(FetchStatus.OK.value, 0)
        return cls(
            total=total,
            counts=counts,
            recovery_rate=ok / total if total else None,
            bytes_total=sum(o.bytes for o in outcomes if o.status is FetchStatus.OK),
            failures=[o.to_dict() for o in outcomes if o.status is not FetchStatus.OK],
        )

    @property
    def recovered(self) -> int:
        return self.counts.get(FetchStatus.OK.value, 0)

    def rate_text(self) -> str | None:
        return format_rate(self.recovered, self.total)

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "totals": self.counts,
            "recovery_rate": self.recovery_rate,
            "recovery_rate_text": self.rate_text(),
            "bytes": self.bytes_total,
            "bytes_text": format_bytes(self.bytes_total),
            "failures": self.failures,
        }


async def hash_file(path: str) -> str:
    digest = hashlib.sha256()
    async with aiofiles.open(path, "rb") as f:
        while True:
            chunk = await f.read(CHUNK_SIZE)
            if not chunk:
                break
            digest.update(chunk)
    return digest.hexdigest()


def _retry_after(resp: aiohttp.ClientResponse, cap: float) -> float | None:
    value = resp.headers.get("Retry-After")
    if not value:
        return None
    try:
        seconds = float(value)
    except ValueError:
        try:
            when = parsedate_to_datetime(value)
        except (TypeError, ValueError):
            logger.warning(f"unparseable Retry-After header {value!r}")
            return None
        seconds = (when - datetime.now(timezone.utc)).total_seconds()
    return min(max(seconds, 0.0), cap)


async def _download(resp: aiohttp.ClientResponse, dest: str) -> tuple[str, int]:
    """Streams the body to dest.part, returning (sha256, size). The caller renames on success."""
    tmp = f"{dest}.part"
    digest = hashlib.sha256()
    size = 0
    try:
        async with aiofiles.open(tmp, "wb") as f:
            async for chunk in resp.content.iter_chunked(CHUNK_SIZE):
                digest.update(chunk)
                size += len(chunk)
                await f.write(chunk)
    except (aiohttp.ClientError, ConnectionError):
        raise
    except OSError as e:
        raise FatalIOError(f"could not write {tmp}: {e}", path=tmp)
    return digest.hexdigest(), size


def _discard(path: str):
    try:
        os.remove(path)
    except FileNotFoundError:
        pass


async def fetch_one(session: aiohttp.ClientSession, entry: ManifestEntry, out_dir: str, policy: FetchPolicy,
                    sleep=asyncio.sleep, rng: np.random.Generator | None = None) -> FetchOutcome:
    rng = rng if rng is not None else np.random.default_rng()
    dest = os.path.join(out_dir, entry.path)
    if os.path.exists(dest):
        if entry.sha256 is None or await hash_file(dest) == entry.sha256:
            logger.debug(f"{entry.sample_id}: already present and verified, skipping")
            return FetchOutcome(entry.sample_id, FetchStatus.OK, 0, os.path.getsize(dest), skipped=True)
        logger.warning(f"{entry.sample_id}: local copy fails its checksum, downloading again")
    os.makedirs(os.path.dirname(dest) or out_dir, exist_ok=True)

    status, code, error = FetchStatus.NETWORK, None, None
    redownloaded = False
    attempts = 0
    budget = policy.max_attempts
    while attempts < budget:
        attempts += 1
        delay = None
        try:
            async with session.get(entry.url, max_redirects=policy.max_redirects) as resp:
                code = resp.status
                if 200 <= code < 300:
                    digest, size = await _download(resp, dest)
                    if entry.sha256 is not None and digest != entry.sha256:
                        _discard(f"{dest}.part")
                        status, error = FetchStatus.CORRUPT, f"sha256 {digest} != {entry.sha256}"
                        if redownloaded:
                            break
                        redownloaded = True
                        # one re-download even when the mismatch used up the last attempt
                        budget = max(budget, attempts + 1)
                        logger.warning(f"{entry.sample_id}: checksum mismatch, downloading once more")
                        continue
                    os.replace(f"{dest}.part", dest)
                    return FetchOutcome(entry.sample_id, FetchStatus.OK, attempts, size, code)
                if code in (429, 503):
                    status, error = FetchStatus.RATE_LIMITED, f"HTTP {code}"
                    delay = _retry_after(resp, policy.max_retry_after)
                elif 400 <= code < 500:
                    status, error = FetchStatus.EXPIRED, f"HTTP {code}"
                    break
                else:
                    status, error = FetchStatus.NETWORK, f"HTTP {code}"
        except aiohttp.TooManyRedirects as e:
            status, error = FetchStatus.EXPIRED, f"too many redirects: {e}"
            break
        except (asyncio.TimeoutError, aiohttp.ClientError, ConnectionResetError) as e:
            status, error = FetchStatus.NETWORK, f"{type(e).__name__}: {e}"
            _discard(f"{dest}.part")

        if attempts < budget:
            if delay is None:
                delay = policy.backoff(attempts, rng)
            logger.warning(f"{entry.sample_id}: {error} (attempt {attempts}/{budget}), retrying in {delay:.2f}s")
            await sleep(delay)

    logger.info(f"{entry.sample_id}: {status.value} after {attempts} attempt(s) ({error})")
    return FetchOutcome(entry.sample_id, status, attempts, 0, code, error=error)


async def fetch_all(manifest: list[ManifestEntry], out_dir: str, policy: FetchPolicy = FetchPolicy(),
                    session: aiohttp.ClientSession | None = None, sleep=asyncio.sleep,
                    seed: int = Config.SEED) -> tuple[list[FetchOutcome], FetchReport]:
    """
    Fetches every entry with at most policy.max_parallel requests in flight.
    Outcomes come back in manifest order whatever the completion order.
    """
    ensure_dir(out_dir)
    sem = asyncio.Semaphore(policy.max_parallel)
    own_session = session is None
    if own_session:
        session = aiohttp.ClientSession(timeout=aiohttp.ClientTimeout(total=policy.timeout))

    async def bounded(index: int, entry: ManifestEntry) -> FetchOutcome:
        async with sem:
            return await fetch_one(session, entry, out_dir, policy, sleep, np.random.default_rng([seed, index]))

    try:
        outcomes = await asyncio.gather(*(bounded(i, e) for i, e in enumerate(manifest)))
    finally:
        if own_session:
            await session.close()

    report = FetchReport.from_outcomes(list(outcomes))
    logger.info(f"fetched {report.recovered}/{report.total} entries ({report.rate_text() or 'n/a'})")
    return list(outcomes), report


async def verify_local(manifest: list[ManifestEntry], directory: str) -> tuple[list[FetchOutcome], FetchReport]:
    """Re-hashes local files: Ok, Corrupt or Missing per entry. Never touches the network."""
    if not os.path.isdir(directory):
        raise ValidationError(f"directory {directory} does not exist", path=directory)
    outcomes = []
    for entry in manifest:
        dest = os.path.join(directory, entry.path)
        if not os.path.isfile(dest):
            outcomes.append(FetchOutcome(entry.sample_id, FetchStatus.MISSING, 0))
            continue
        size = os.path.getsize(dest)
        if entry.sha256 is not None and await hash_file(dest) != entry.sha256:
            outcomes.append(FetchOutcome(entry.sample_id, FetchStatus.CORRUPT, 0, size, error="sha256 mismatch"))
        else:
            outcomes.append(FetchOutcome(entry.sample_id, FetchStatus.OK, 0, size))
    report = FetchReport.from_outcomes(outcomes, statuses=[FetchStatus.OK, FetchStatus.CORRUPT, FetchStatus.MISSING])
    logger.info(f"verified {report.recovered}/{report.total} local files")
    return outcomes, report
