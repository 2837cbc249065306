"""Event records, notifications, the NDJSON event log and simple notifiers."""

from __future__ import annotations

import json
import os
import sys
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Protocol

from .measurements import format_rfc3339, parse_rfc3339

FIRED = "fired"
SKIPPED = "skipped"
DISCARDED = "discarded"
NOTIFY_FAILED = "notify_failed"
EVENT_KINDS = (FIRED, SKIPPED, DISCARDED, NOTIFY_FAILED)


@dataclass(frozen=True)
class EventRecord:
    kind: str
    timestamp: float
    rule_rid: str | None
    rule_class: str | None = None
    rule_name: str | None = None
    suggestion: str | None = None
    area_path: tuple[str, ...] = ()
    values: dict[str, float] = field(default_factory=dict)
    tick_id: int | None = None
    detail: Any = None

    _KEYS = (("ruleRid", "rule_rid"), ("ruleClass", "rule_class"), ("ruleName", "rule_name"),
             ("suggestion", "suggestion"), ("values", "values"), ("tickId", "tick_id"),
             ("detail", "detail"))

    def to_json(self) -> dict[str, Any]:
        doc = {"kind": self.kind, "timestamp": format_rfc3339(self.timestamp),
               "areaPath": list(self.area_path)}
        for wire, attr in self._KEYS:
            doc[wire] = getattr(self, attr)
        return doc

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> EventRecord:
        kwargs = {attr: doc.get(wire) for wire, attr in cls._KEYS}
        kwargs["values"] = kwargs["values"] or {}
        return cls(kind=doc["kind"], timestamp=parse_rfc3339(doc["timestamp"]),
                   area_path=tuple(doc.get("areaPath") or ()), **kwargs)


@dataclass(frozen=True)
class Notification:
    rule_name: str
    suggestion: str
    area_path: tuple[str, ...]
    timestamp: float
    values: dict[str, float]
    type: str = "recommendation"

    def to_json(self) -> dict[str, Any]:
        return {"type": self.type, "ruleName": self.rule_name, "suggestion": self.suggestion,
                "areaPath": list(self.area_path), "timestamp": format_rfc3339(self.timestamp),
                "values": dict(self.values)}

    def to_frame(self) -> str:
        return json.dumps(self.to_json(), ensure_ascii=False)


@dataclass(frozen=True)
class PublishResult:
    delivered: int
    failures: tuple[str, ...] = ()


class Notifier(Protocol):
    def publish(self, notification: Notification) -> PublishResult: ...


class NullNotifier:
    """No subscribers: every publish reaches zero clients."""

    def publish(self, notification: Notification) -> PublishResult:
        return PublishResult(0)


class RecordingNotifier:
    """Keeps every notification; each counts as one delivery."""

    def __init__(self):
        self.sent: list[Notification] = []

    def publish(self, notification: Notification) -> PublishResult:
        self.sent.append(notification)
        return PublishResult(1)


class EventSink(Protocol):
    def append(self, record: EventRecord) -> None: ...


class MemoryEventLog:
    def __init__(self):
        self.records: list[EventRecord] = []

    def append(self, record: EventRecord) -> None:
        self.records.append(record)

    def of_kind(self, kind: str) -> list[EventRecord]:
        return [r for r in self.records if r.kind == kind]


class EventLog:
    """Append-only newline-delimited JSON file, one record per line.

    Each record goes out in a single ``write`` on an ``O_APPEND`` descriptor,
    so concurrent writers never interleave within a line. Write failures are
    reported on stderr and otherwise ignored: losing a log line must not stop
    rule evaluation.
    """

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._fd: int | None = os.open(self.path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
        self.write_errors = 0

    def append(self, record: EventRecord) -> None:
        line = (json.dumps(record.to_json(), ensure_ascii=False) + "\n").encode("utf-8")
        with self._lock:
            try:
                if self._fd is None:
                    raise OSError("event log is closed")
                n = os.write(self._fd, line)
                if n != len(line):
                    raise OSError(f"short write ({n}/{len(line)} bytes)")
            except OSError as exc:
                self.write_errors += 1
                print(f"event log: cannot append to {self.path}: {exc}", file=sys.stderr)

    def flush(self) -> None:
        with self._lock:
            if self._fd is not None:
                os.fsync(self._fd)

    def close(self) -> None:
        with self._lock:
            if self._fd is not None:
                os.close(self._fd)
                self._fd = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def iter_events(path: str | os.PathLike) -> Iterator[EventRecord]:
    """Parse an event log. Raises ValueError on a torn or corrupt line."""
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, 1):
            if not raw.endswith(b"\n"):
                raise ValueError(f"{path}:{lineno}: incomplete final line")
            try:
                yield EventRecord.from_json(json.loads(raw))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc


def read_events(path: str | os.PathLike) -> list[EventRecord]:
    if not Path(path).exists():
        return []
    return list(iter_events(path))


def query_events(records: Iterable[EventRecord], *, rule_rid: str | None = None,
                 kind: str | None = None, since: float | None = None,
                 limit: int = 100) -> list[EventRecord]:
    """Matching records, newest first, at most ``limit`` of them."""
    hits = [r for r in records
            if (rule_rid is None or r.rule_rid == rule_rid)
            and (kind is None or r.kind == kind)
            and (since is None or r.timestamp > since)]
    # Stable sort keeps file order among equal timestamps; reverse for newest first.
    hits = list(reversed(sorted(hits, key=lambda r: r.timestamp)))
    return hits[:limit]
