import logging
import os

from config import Config
from database.store import write_json
from features.fetcher import FetchPolicy, FetchStatus, fetch_all, load_manifest, verify_local
from handlers import arg, command, seed_of, write_resolved_config
from util.errors import VerificationFailure
from util.render_template import write_report

logger = logging.getLogger(__name__)

MAX_LISTED_FAILURES = 50


@command(
    "fetch",
    help="download a dataset manifest with retries and checksum verification",
    arguments=[
        arg("--manifest", required=True, help="JSONL, one {id, url, sha256?, path} per line"),
        arg("--max-parallel", type=int, default=Config.MAX_PARALLEL),
        arg("--max-attempts", type=int, default=Config.MAX_ATTEMPTS),
        arg("--base-backoff", type=float, default=Config.BASE_BACKOFF),
        arg("--timeout", type=float, default=Config.REQUEST_TIMEOUT),
        arg("--offline", action="store_true", help="only re-hash files already on disk"),
        arg("--data-dir", default=None, help="with --offline: directory to verify (default: --out/data)"),
    ],
)
async def fetch(args):
    manifest = load_manifest(args.manifest)
    data_dir = args.data_dir if args.offline and args.data_dir else os.path.join(args.out, "data")
    policy = FetchPolicy(max_attempts=args.max_attempts, base_backoff=args.base_backoff,
                         max_parallel=args.max_parallel, timeout=args.timeout)
    write_resolved_config(args, {"manifest": os.path.abspath(args.manifest), "entries": len(manifest),
                                 "data_dir": os.path.abspath(data_dir), "offline": args.offline,
                                 "policy": policy.to_dict()})

    if args.offline:
        outcomes, report = await verify_local(manifest, data_dir)
    else:
        outcomes, report = await fetch_all(manifest, data_dir, policy, seed=seed_of(args))

    write_json(os.path.join(args.out, "report.json"), {**report.to_dict(), "mode": "offline" if args.offline else "fetch",
                                                      "outcomes": [o.to_dict() for o in outcomes]})
    await write_report(args.out, "fetch_report.md.j2", report=report, max_listed=MAX_LISTED_FAILURES)
    print(f"recovered {report.recovered}/{report.total} ({report.rate_text() or 'n/a'})")

    if args.offline and report.recovered != report.total:
        bad = [o.sample_id for o in outcomes if o.status is not FetchStatus.OK]
        raise VerificationFailure(f"{len(bad)} local files are missing or corrupt", entries=bad[:MAX_LISTED_FAILURES])
