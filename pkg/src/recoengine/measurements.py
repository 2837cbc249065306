"""Per-tick measurement fetching and a scriptable mock sensor server.

Wire format of a measurement response (HTTP 200)::

    {"value": 21.5, "timestamp": "2024-03-01T10:00:00Z", "unit": "C"}

``unit`` is optional.
"""

from __future__ import annotations

import json
import logging
import math
import random
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from datetime import datetime, timezone
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Iterable, Mapping
from urllib.parse import urlsplit

import httpx

log = logging.getLogger(__name__)

# Accepted clock skew between a sensor's timestamp and our fetch time.
MAX_FUTURE_SKEW = 5.0

_RFC3339 = re.compile(
    r"^(\d{4}-\d{2}-\d{2})[Tt ](\d{2}:\d{2}:\d{2})(\.\d+)?([Zz]|[+-]\d{2}:\d{2})$")


def parse_rfc3339(text: str) -> float:
    """RFC 3339 timestamp to epoch seconds. Offsets are mandatory."""
    m = _RFC3339.match(text) if isinstance(text, str) else None
    if m is None:
        raise ValueError(f"not an RFC 3339 timestamp: {text!r}")
    date, clock, frac, off = m.groups()
    off = "+00:00" if off in ("Z", "z") else off
    dt = datetime.fromisoformat(f"{date}T{clock}{off}")
    return dt.timestamp() + (float(frac) if frac else 0.0)


def format_rfc3339(ts: float) -> str:
    dt = datetime.fromtimestamp(ts, tz=timezone.utc)
    return dt.strftime("%Y-%m-%dT%H:%M:%S.") + f"{dt.microsecond // 1000:03d}Z"


class MissingMeasurement(LookupError):
    """A rule needed a URI that has no value this tick."""

    def __init__(self, uri: str, reason: str):
        super().__init__(f"{uri}: {reason}")
        self.uri = uri
        self.reason = reason


@dataclass(frozen=True)
class Measurement:
    uri: str
    value: float
    timestamp: float
    unit: str | None = None


@dataclass(frozen=True)
class MeasurementCache:
    tick_id: int
    entries: Mapping[str, Measurement] = field(default_factory=dict)
    failures: Mapping[str, str] = field(default_factory=dict)

    @classmethod
    def of(cls, values: Mapping[str, float], tick_id: int = 0, now: float = 0.0) -> MeasurementCache:
        """Cache built directly from ``uri -> value`` (tests, replays)."""
        return cls(tick_id, {u: Measurement(u, float(v), now) for u, v in values.items()})

    def value(self, uri: str) -> float:
        m = self.entries.get(uri)
        if m is None:
            raise MissingMeasurement(uri, self.failures.get(uri, "not fetched this tick"))
        return m.value

    def values(self, uris: Iterable[str]) -> dict[str, float]:
        return {u: self.entries[u].value for u in uris if u in self.entries}

    @property
    def requested(self) -> set[str]:
        return set(self.entries) | set(self.failures)


def parse_measurement(uri: str, payload: Any, fetched_at: float) -> Measurement:
    if not isinstance(payload, dict):
        raise ValueError("response body is not a JSON object")
    value = payload.get("value")
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ValueError(f"'value' must be a finite number, got {value!r}")
    ts = parse_rfc3339(payload.get("timestamp"))
    if ts > fetched_at + MAX_FUTURE_SKEW:
        raise ValueError(f"timestamp {payload['timestamp']} is in the future")
    unit = payload.get("unit")
    if unit is not None and not isinstance(unit, str):
        raise ValueError("'unit' must be a string")
    return Measurement(uri, float(value), min(ts, fetched_at), unit)


class MeasurementGateway:
    """Fetches each requested URI exactly once per call, concurrently.

    ``base_url`` redirects every request to ``base_url + <path of the URI>``,
    which is how a graph written against real gateways is pointed at the mock
    server.
    """

    def __init__(self, *, deadline: float = 2.0, base_url: str | None = None,
                 max_workers: int = 16, transport: httpx.BaseTransport | None = None,
                 clock=time.time):
        if deadline <= 0:
            raise ValueError("deadline must be > 0")
        self.deadline = deadline
        self.base_url = base_url.rstrip("/") if base_url else None
        self.clock = clock
        self._client = httpx.Client(transport=transport, timeout=deadline)
        self._pool = ThreadPoolExecutor(max_workers=max_workers, thread_name_prefix="fetch")
        self._tick = -1
        self._lock = threading.Lock()

    def close(self) -> None:
        self._pool.shutdown(wait=False, cancel_futures=True)
        self._client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def target(self, uri: str) -> str:
        if self.base_url is None:
            return uri
        parts = urlsplit(uri)
        path = parts.path or "/"
        return self.base_url + path + (f"?{parts.query}" if parts.query else "")

    def _get(self, uri: str) -> Measurement:
        resp = self._client.get(self.target(uri))
        fetched_at = self.clock()
        if resp.status_code != 200:
            raise ValueError(f"HTTP {resp.status_code}")
        return parse_measurement(uri, resp.json(), fetched_at)

    def fetch_all(self, uris: Iterable[str], deadline: float | None = None,
                  tick_id: int | None = None) -> MeasurementCache:
        deadline = self.deadline if deadline is None else deadline
        if deadline <= 0:
            raise ValueError("deadline must be > 0")
        with self._lock:
            if tick_id is None:
                tick_id = self._tick + 1
            self._tick = max(self._tick, tick_id)
        todo = sorted(set(uris))
        futures = {self._pool.submit(self._get, u): u for u in todo}
        done, pending = wait(futures, timeout=deadline)
        entries: dict[str, Measurement] = {}
        failures: dict[str, str] = {}
        for fut in pending:
            fut.cancel()
            failures[futures[fut]] = f"no response within {deadline:g}s"
        for fut in done:
            uri = futures[fut]
            try:
                entries[uri] = fut.result()
            except Exception as exc:  # per-URI isolation: any failure is data
                failures[uri] = f"{type(exc).__name__}: {exc}" if str(exc) else type(exc).__name__
        if failures:
            log.debug("tick %s: %d fetch failures", tick_id, len(failures))
        return MeasurementCache(tick_id, entries, failures)


def fetch_all(uris: Iterable[str], deadline: float, **kwargs) -> MeasurementCache:
    """One-shot fetch with a throwaway gateway."""
    with MeasurementGateway(deadline=deadline, **kwargs) as gw:
        return gw.fetch_all(uris, deadline)


class MockSensorServer:
    """Serves scripted measurement timelines over HTTP on loopback.

    ``script`` maps a URL path to a list of timeline entries. An entry is a
    number, or an object with any of ``value``, ``unit``, ``status`` (HTTP
    status to answer with) and ``delay`` (seconds to stall first). The
    timeline advances per request to that path (``mode="request"``) or every
    ``step`` seconds of wall time (``mode="clock"``); the last entry repeats.

    ``failure_rate`` answers a seeded random fraction of requests with 500.
    ``GET /__counters__`` returns the per-path request counters.
    """

    def __init__(self, script: Mapping[str, list] | None = None, *, host: str = "127.0.0.1",
                 port: int = 0, mode: str = "request", step: float = 1.0,
                 failure_rate: float = 0.0, seed: int = 0):
        if mode not in ("request", "clock"):
            raise ValueError(f"unknown mode {mode!r}")
        self.script: dict[str, list] = {p: list(t) for p, t in (script or {}).items()}
        self.mode, self.step = mode, step
        self.failure_rate = failure_rate
        self._rng = random.Random(seed)
        self._lock = threading.Lock()
        self._counts: dict[str, int] = {}
        self._started = time.monotonic()
        self._httpd = ThreadingHTTPServer((host, port), self._handler_class())
        self._httpd.daemon_threads = True
        self._thread: threading.Thread | None = None

    @classmethod
    def from_file(cls, path, **kwargs) -> MockSensorServer:
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh), **kwargs)

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    @property
    def base_url(self) -> str:
        host = self._httpd.server_address[0]
        return f"http://{host}:{self.port}"

    def url(self, path: str) -> str:
        return self.base_url + path

    def start(self) -> MockSensorServer:
        self._started = time.monotonic()
        self._thread = threading.Thread(target=self._httpd.serve_forever, args=(0.05,),
                                        name="mock-sensors", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def set_timeline(self, path: str, entries: list) -> None:
        with self._lock:
            self.script[path] = list(entries)

    def counts(self) -> dict[str, int]:
        with self._lock:
            return dict(self._counts)

    @property
    def total_requests(self) -> int:
        with self._lock:
            return sum(self._counts.values())

    def reset_counts(self) -> None:
        with self._lock:
            self._counts.clear()

    def _next(self, path: str) -> tuple[int, Any]:
        """(status, entry-or-body) for one request, updating counters atomically."""
        with self._lock:
            n = self._counts.get(path, 0)
            self._counts[path] = n + 1
            timeline = self.script.get(path)
            if not timeline:
                return 404, None
            if self.failure_rate and self._rng.random() < self.failure_rate:
                return 500, None
            if self.mode == "request":
                idx = n
            else:
                idx = int((time.monotonic() - self._started) / self.step)
            return 200, timeline[min(idx, len(timeline) - 1)]

    def _handler_class(self):
        server = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"
            disable_nagle_algorithm = True  # headers and body go out in separate writes

            def log_message(self, fmt, *args):
                log.debug("mock: " + fmt, *args)

            def _send(self, status: int, body: Any) -> None:
                data = json.dumps(body).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def do_GET(self):
                path = urlsplit(self.path).path
                if path == "/__counters__":
                    self._send(200, server.counts())
                    return
                status, entry = server._next(path)
                if status != 200:
                    self._send(status, {"error": "not found" if status == 404 else "injected failure"})
                    return
                if isinstance(entry, dict):
                    if entry.get("delay"):
                        time.sleep(float(entry["delay"]))
                    if entry.get("status", 200) != 200:
                        self._send(int(entry["status"]), {"error": "scripted failure"})
                        return
                    body = {"value": entry.get("value")}
                    if entry.get("unit") is not None:
                        body["unit"] = entry["unit"]
                else:
                    body = {"value": entry}
                body["timestamp"] = format_rfc3339(time.time())
                self._send(200, body)

        return Handler
