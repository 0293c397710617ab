import asyncio
import hashlib
import json

import pytest
from aiohttp import web

from features.fetcher import (
    FetchPolicy, FetchReport, FetchStatus, ManifestEntry, fetch_all, parse_manifest, verify_local,
)
from util.errors import FatalIOError, ValidationError

PAYLOAD = b"material-segmentation-sample" * 100
SHA = hashlib.sha256(PAYLOAD).hexdigest()


class Recorder:
    def __init__(self):
        self.delays = []

    async def __call__(self, delay):
        self.delays.append(delay)


@pytest.fixture
async def mock_server(aiohttp_server):
    hits = {}
    state = {"in_flight": 0, "peak": 0}

    def count(name):
        hits[name] = hits.get(name, 0) + 1
        return hits[name]

    async def ok(request):
        count(request.match_info["name"])
        state["in_flight"] += 1
        state["peak"] = max(state["peak"], state["in_flight"])
        await asyncio.sleep(0.01)
        state["in_flight"] -= 1
        return web.Response(body=PAYLOAD)

    async def gone(request):
        count("gone")
        return web.Response(status=404)

    async def limited(request):
        if count("limited") == 1:
            return web.Response(status=429, headers={"Retry-After": "2"})
        return web.Response(body=PAYLOAD)

    async def corrupt(request):
        count("corrupt")
        return web.Response(body=PAYLOAD[:-1] + b"?")

    async def broken(request):
        count("broken")
        return web.Response(status=500)

    async def loop(request):
        count("loop")
        raise web.HTTPFound("/loop")

    async def slow(request):
        count("slow")
        await asyncio.sleep(0.5)
        return web.Response(body=PAYLOAD)

    app = web.Application()
    app.router.add_get("/ok/{name}", ok)
    app.router.add_get("/gone", gone)
    app.router.add_get("/limited", limited)
    app.router.add_get("/corrupt", corrupt)
    app.router.add_get("/broken", broken)
    app.router.add_get("/loop", loop)
    app.router.add_get("/slow", slow)
    server = await aiohttp_server(app)
    server.hits = hits
    server.state = state
    return server


def _entry(server, sid, route, sha=SHA):
    row = {"id": sid, "url": str(server.make_url(route)), "path": f"images/{sid}.jpg"}
    if sha:
        row["sha256"] = sha
    return ManifestEntry.from_dict(row)


async def _fetch_one(server, tmp_path, route, policy=FetchPolicy(base_backoff=1.0)):
    sleep = Recorder()
    outcomes, report = await fetch_all([_entry(server, "x", route)], str(tmp_path), policy, sleep=sleep)
    return outcomes[0], report, sleep.delays


async def test_ok_download_is_verified_and_stored(mock_server, tmp_path):
    outcome, report, delays = await _fetch_one(mock_server, tmp_path, "/ok/a")
    assert outcome.status is FetchStatus.OK
    assert outcome.attempts == 1 and outcome.bytes == len(PAYLOAD)
    assert (tmp_path / "images" / "x.jpg").read_bytes() == PAYLOAD
    assert not (tmp_path / "images" / "x.jpg.part").exists()
    assert report.recovery_rate == 1.0 and delays == []


async def test_404_is_expired_after_one_attempt(mock_server, tmp_path):
    outcome, _, delays = await _fetch_one(mock_server, tmp_path, "/gone")
    assert outcome.status is FetchStatus.EXPIRED
    assert outcome.attempts == 1 and outcome.final_http_code == 404
    assert mock_server.hits["gone"] == 1
    assert delays == []


async def test_429_honours_retry_after(mock_server, tmp_path):
    outcome, _, delays = await _fetch_one(mock_server, tmp_path, "/limited")
    assert outcome.status is FetchStatus.OK
    assert outcome.attempts == 2
    assert delays == [2.0]


async def test_checksum_mismatch_is_corrupt_after_one_redownload(mock_server, tmp_path):
    outcome, _, delays = await _fetch_one(mock_server, tmp_path, "/corrupt")
    assert outcome.status is FetchStatus.CORRUPT
    assert outcome.attempts == 2
    assert mock_server.hits["corrupt"] == 2
    assert delays == []
    assert not (tmp_path / "images" / "x.jpg").exists()
    assert not (tmp_path / "images" / "x.jpg.part").exists()


async def test_checksum_mismatch_gets_its_redownload_on_a_single_attempt_budget(mock_server, tmp_path):
    outcome, _, delays = await _fetch_one(mock_server, tmp_path, "/corrupt", FetchPolicy(max_attempts=1))
    assert outcome.status is FetchStatus.CORRUPT
    assert outcome.attempts == 2
    assert mock_server.hits["corrupt"] == 2
    assert delays == []


async def test_server_errors_retry_with_exponential_backoff(mock_server, tmp_path):
    outcome, _, delays = await _fetch_one(mock_server, tmp_path, "/broken", FetchPolicy(base_backoff=1.0, jitter=0.1))
    assert outcome.status is FetchStatus.NETWORK
    assert outcome.attempts == 4 and mock_server.hits["broken"] == 4
    assert len(delays) == 3
    for k, d in enumerate(delays):
        assert 2 ** k <= d <= 2 ** k * 1.1


async def test_redirect_loop_is_expired(mock_server, tmp_path):
    outcome, _, delays = await _fetch_one(mock_server, tmp_path, "/loop", FetchPolicy(max_redirects=3))
    assert outcome.status is FetchStatus.EXPIRED
    assert outcome.attempts == 1 and delays == []


async def test_timeout_is_a_network_failure(mock_server, tmp_path):
    outcome, _, delays = await _fetch_one(mock_server, tmp_path, "/slow",
                                          FetchPolicy(max_attempts=2, timeout=0.1, base_backoff=0.0))
    assert outcome.status is FetchStatus.NETWORK
    assert outcome.attempts == 2 and len(delays) == 1


async def test_mixed_manifest_report_and_idempotent_rerun(mock_server, tmp_path):
    manifest = [_entry(mock_server, f"ok{i}", f"/ok/{i}") for i in range(5)]
    manifest += [_entry(mock_server, "gone", "/gone"), _entry(mock_server, "bad", "/corrupt")]
    policy = FetchPolicy(max_parallel=2)
    outcomes, report = await fetch_all(manifest, str(tmp_path), policy, sleep=Recorder())
    assert [o.sample_id for o in outcomes] == [e.sample_id for e in manifest]
    assert report.total == 7 and sum(report.counts.values()) == 7
    assert report.counts["Ok"] == 5 and report.counts["ExpiredUrl"] == 1 and report.counts["Corrupt"] == 1
    assert report.rate_text() == "71.4%"
    assert mock_server.state["peak"] <= 2

    hits_before = dict(mock_server.hits)
    again, report2 = await fetch_all(manifest, str(tmp_path), policy, sleep=Recorder())
    assert all(o.skipped and o.attempts == 0 for o in again if o.status is FetchStatus.OK)
    assert report2.counts == report.counts
    assert all(mock_server.hits[str(i)] == hits_before[str(i)] for i in range(5))


async def test_empty_manifest_report(tmp_path):
    outcomes, report = await fetch_all([], str(tmp_path / "out"), sleep=Recorder())
    assert outcomes == [] and report.total == 0
    doc = json.loads(json.dumps(report.to_dict()))
    assert doc["recovery_rate"] is None and doc["recovery_rate_text"] is None


async def test_unwritable_output_is_fatal(tmp_path, mock_server):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(FatalIOError):
        await fetch_all([_entry(mock_server, "a", "/ok/a")], str(blocker / "out"), sleep=Recorder())


async def test_verify_local(tmp_path):
    rows = [{"id": n, "url": f"http://example.org/{n}", "path": f"{n}.bin", "sha256": SHA} for n in "abc"]
    manifest = parse_manifest(rows)
    (tmp_path / "a.bin").write_bytes(PAYLOAD)
    flipped = bytearray(PAYLOAD)
    flipped[10] ^= 0xFF
    (tmp_path / "b.bin").write_bytes(bytes(flipped))
    outcomes, report = await verify_local(manifest, str(tmp_path))
    assert [o.status for o in outcomes] == [FetchStatus.OK, FetchStatus.CORRUPT, FetchStatus.MISSING]
    assert report.counts == {"Ok": 1, "Corrupt": 1, "Missing": 1}


@pytest.mark.parametrize("row", [
    {"id": "a", "url": "ftp://host/x", "path": "x"},
    {"id": "a", "url": "http://host/x", "path": "../x"},
    {"id": "a", "url": "http://host/x", "path": "/etc/x"},
    {"id": "a", "url": "http://host/x", "path": "x", "sha256": "abc"},
    {"id": "a", "path": "x"},
    {"id": "a", "url": "http://host/x", "path": ""},
    {"id": "a", "url": "http://host/x", "path": "."},
    {"id": "a", "url": "http://host/x", "path": "images/./"},
    {"id": "a", "url": "http://host/x", "path": "images/"},
])
def test_manifest_entry_validation(row):
    with pytest.raises(ValidationError):
        ManifestEntry.from_dict(row)


def test_duplicate_ids_are_rejected():
    row = {"id": "a", "url": "http://host/x", "path": "x"}
    with pytest.raises(ValidationError):
        parse_manifest([row, dict(row, path="y")])


def test_duplicate_paths_are_rejected():
    row = {"id": "a", "url": "http://host/x", "path": "images/x.jpg"}
    with pytest.raises(ValidationError, match="share the path"):
        parse_manifest([row, dict(row, id="b", path="images/./x.jpg")])
    assert len(parse_manifest([row, dict(row, id="b", path="images/y.jpg")])) == 2


def test_report_rate_for_large_counts():
    report = FetchReport(total=44560, counts={"Ok": 41396}, recovery_rate=41396 / 44560, bytes_total=0)
    assert report.rate_text() == "92.9%"
