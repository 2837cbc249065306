"""The periodic evaluation loop.

Load the graph, build the rule tree, then every tick: pick the rules due this
tick, fetch each needed URI once, fire the rules in tree order and log what
happened.
"""

from __future__ import annotations

import logging
import os
import threading
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Iterable

from .events import (
    SKIPPED, EventRecord, EventSink, MemoryEventLog, Notifier, NullNotifier,
)
from .measurements import MeasurementCache
from .model import (
    CHILD, CONTAINS, GATHERS, HAS_RULE, Parameter, ResourceGraph, RuleRecord, Sensor, Violation,
    area_path, validate_graph,
)
from .rules import (
    FireResult, Rule, RuleRegistry, RuleRejected, TickContext, default_registry, discard_record,
)
from .store import load_graph

log = logging.getLogger(__name__)


class GraphInvalid(Exception):
    def __init__(self, violations: list[Violation]):
        super().__init__("graph is not well-formed:\n  " + "\n  ".join(map(str, violations)))
        self.violations = violations


@dataclass(frozen=True)
class RuleEntry:
    """A rule attached directly to an Area; these are the rules the engine schedules."""

    rule: Rule
    area_rid: str
    area_path: tuple[str, ...]


@dataclass
class RuleTree:
    entries: list[RuleEntry] = field(default_factory=list)
    graph: ResourceGraph = field(default_factory=ResourceGraph)
    paths: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def rules(self) -> list[Rule]:
        return [e.rule for e in self.entries]

    def all_rules(self) -> Iterable[Rule]:
        for e in self.entries:
            yield from e.rule.walk()

    def path_of(self, rid: str) -> tuple[str, ...]:
        return self.paths.get(rid, ())

    def describe(self) -> tuple:
        return tuple((e.area_path, e.rule.describe()) for e in self.entries)


@dataclass(frozen=True)
class LoadStats:
    total_time: float
    instantiation_time: float
    rule_count: int
    discarded_count: int

    def to_json(self) -> dict[str, Any]:
        return {"totalTime": self.total_time, "instantiationTime": self.instantiation_time,
                "ruleCount": self.rule_count, "discardedCount": self.discarded_count}


@dataclass(frozen=True)
class TickReport:
    tick_id: int
    evaluated: int
    fired: int
    skipped: int
    duration: float = 0.0


@dataclass(frozen=True)
class ScheduleWarning:
    rule_rid: str
    rule_name: str
    period: float
    sensor_rid: str
    sampling_period: float
    parameter_uri: str

    def __str__(self) -> str:
        return (f"rule {self.rule_rid} ({self.rule_name}) runs every {self.period:g}s but sensor "
                f"{self.sensor_rid} samples {self.parameter_uri} every {self.sampling_period:g}s")


def _area_order(graph: ResourceGraph) -> list[str]:
    """Areas in pre-order from the root, following edge order."""
    root = graph.root()
    if root is None:
        return []
    order, stack = [], [root.rid]
    while stack:
        rid = stack.pop()
        order.append(rid)
        stack.extend(reversed(graph.children(rid, CONTAINS)))
    return order


def build_tree(graph: ResourceGraph, registry: RuleRegistry,
               now: float | None = None) -> tuple[RuleTree, list[EventRecord]]:
    """Instantiate every rule reachable from the root Area.

    Rejected rules (and composites with a rejected child) are left out and
    reported as ``discarded`` records. ``graph`` must already be well-formed.
    """
    now = time.time() if now is None else now
    discarded: list[EventRecord] = []
    # Composites whose child vertex was excluded by the store.
    lost_child = {e.src for d in graph.diagnostics for e in d.dropped_edges
                  if e.label == CHILD and e.dst == d.rid}
    tree = RuleTree(graph=graph)

    for d in graph.diagnostics:
        if d.class_name in registry.schemas and not registry.schemas.is_subclass(d.class_name, "Rule"):
            log.warning("excluded %s vertex %s: %s", d.class_name, d.rid,
                        "; ".join(map(str, d.violations)))
            continue
        owner = next((e.src for e in d.dropped_edges
                      if e.dst == d.rid and e.label in (HAS_RULE, CHILD) and e.src in graph), None)
        path = area_path(graph, owner) if owner else ()
        rej = RuleRejected(str(d.rid), d.class_name, [str(v) for v in d.violations], d.fields)
        discarded.append(discard_record(rej, now, path))

    def make(rid: str, path: tuple[str, ...]) -> Rule:
        rec = graph.vertex(rid)
        assert isinstance(rec, RuleRecord)
        tree.paths[rid] = path
        children, bad = [], []
        for c in graph.children(rid, CHILD):
            try:
                children.append(make(c, path))
            except RuleRejected:
                bad.append(c)
        if rid in lost_child:
            bad.append("(excluded at load)")
        try:
            if bad:
                raise RuleRejected(rid, rec.class_name, [f"invalid child {c}" for c in bad])
            return registry.instantiate(rec, children)
        except RuleRejected as rej:
            tree.paths.pop(rid, None)
            discarded.append(discard_record(rej, now, path, rec.name))
            raise

    for area in _area_order(graph):
        path = tuple(area_path(graph, area))
        for rid in graph.children(area, HAS_RULE):
            try:
                rule = make(rid, path)
            except RuleRejected:
                continue
            tree.entries.append(RuleEntry(rule, area, path))
    return tree, discarded


def load_and_build(path: str | os.PathLike, registry: RuleRegistry,
                   events: EventSink | None = None) -> tuple[RuleTree, LoadStats]:
    """Load the graph file and build the rule tree, timing both phases.

    Raises GraphFormatError (unparsable file), OSError (unreadable) or
    GraphInvalid (structural violations). Per-rule problems only discard
    that rule.
    """
    t0 = time.perf_counter()
    graph = load_graph(path, registry.schemas)
    violations = validate_graph(graph)
    if violations:
        raise GraphInvalid(violations)
    t1 = time.perf_counter()
    tree, discarded = build_tree(graph, registry)
    t2 = time.perf_counter()
    if events is not None:
        for rec in discarded:
            events.append(rec)
    return tree, LoadStats(t2 - t0, t2 - t1, len(tree), len(discarded))


def collect_uris(rules: Iterable[Rule]) -> set[str]:
    uris: set[str] = set()
    for r in rules:
        uris |= r.required_uris()
    return uris


def _exact(x: float) -> Fraction:
    return Fraction(x).limit_denominator(10**9)


def is_due(period: float | None, tick: float, tick_id: int) -> bool:
    """Nearest-tick scheduling: due when ``(tick_id * tick) mod period < tick``."""
    if period is None:
        return True
    t, p = _exact(tick), _exact(period)
    return (tick_id * t) % p < t


def validate_schedule(tree: RuleTree, tick: float) -> list[ScheduleWarning]:
    """One warning per scheduled rule whose period is not longer than the sampling
    period of some sensor gathering a parameter the rule reads."""
    graph = tree.graph
    by_uri: dict[str, list[Parameter]] = {}
    for p in graph.of_type(Parameter):
        by_uri.setdefault(p.uri, []).append(p)
    warnings = []
    for entry in tree.entries:
        rule = entry.rule
        period = rule.period or tick
        worst = None
        for uri in sorted(rule.required_uris()):
            sensors = [graph.vertex(e.src) for p in by_uri.get(uri, ()) for e in graph.in_edges(p.rid, GATHERS)]
            sensors = [s for s in sensors if isinstance(s, Sensor)]
            if not sensors:
                log.info("rule %s: no sensor recorded for %s; sampling constraint unverifiable",
                         rule.rid, uri)
                continue
            for s in sensors:
                if period <= s.sampling_period and (worst is None or s.sampling_period > worst[0].sampling_period):
                    worst = (s, uri)
        if worst:
            s, uri = worst
            warnings.append(ScheduleWarning(rule.rid, rule.name, period, s.rid, s.sampling_period, uri))
    return warnings


class Engine:
    """Owns the live rule tree and runs ticks against it.

    ``run_tick`` and tree swaps share one lock, so a reload always lands
    between ticks and ticks never overlap.
    """

    def __init__(self, registry: RuleRegistry | None = None, *, gateway: Any = None,
                 notifier: Notifier | None = None, events: EventSink | None = None,
                 tick: float = 1.0, fetch_deadline: float | None = None, clock=time.time):
        if tick <= 0:
            raise ValueError("tick must be > 0")
        self.registry = registry or default_registry()
        self.gateway = gateway
        self.notifier = notifier or NullNotifier()
        self.events = events if events is not None else MemoryEventLog()
        self.tick = tick
        self.fetch_deadline = fetch_deadline or min(tick, 5.0)
        self.clock = clock
        self.tree = RuleTree()
        self.graph_path: str | None = None
        self.last_stats: LoadStats | None = None
        self.last_cache: MeasurementCache | None = None
        self.next_tick = 0
        self.overruns = 0
        self.fired_total = 0
        self.running = False
        self._lock = threading.RLock()

    # -- loading -------------------------------------------------------------

    def load(self, path: str | os.PathLike | None = None) -> LoadStats:
        """Build a tree from ``path`` (default: the last loaded path) and swap it in.

        On any load error the current tree stays in place and the error is raised.
        """
        path = os.fspath(path) if path is not None else self.graph_path
        if path is None:
            raise ValueError("no graph path configured")
        staged = MemoryEventLog()
        tree, stats = load_and_build(path, self.registry, staged)
        with self._lock:
            self.tree = tree
            self.graph_path = path
            self.last_stats = stats
            for rec in staged.records:
                self.events.append(rec)
        for w in validate_schedule(tree, self.tick):
            log.warning("schedule: %s", w)
        return stats

    reload = load

    # -- ticking -------------------------------------------------------------

    def _fetch(self, uris: set[str], tick_id: int) -> MeasurementCache:
        if not uris:
            return MeasurementCache(tick_id)
        if self.gateway is None:
            return MeasurementCache(tick_id, {}, {u: "no measurement gateway configured" for u in uris})
        try:
            return self.gateway.fetch_all(uris, self.fetch_deadline, tick_id=tick_id)
        except Exception as exc:
            log.error("tick %d: measurement fetch failed: %s", tick_id, exc)
            return MeasurementCache(tick_id, {}, {u: f"fetch failed: {exc}" for u in uris})

    def run_tick(self, now: float | None = None) -> TickReport:
        with self._lock:
            started = time.perf_counter()
            tick_id = self.next_tick
            self.next_tick += 1
            now = self.clock() if now is None else now
            tree = self.tree
            due = [e for e in tree.entries if is_due(e.rule.period, self.tick, tick_id)]
            cache = self._fetch(collect_uris(e.rule for e in due), tick_id)
            self.last_cache = cache
            ctx = TickContext(tick_id, now, cache, self.notifier, self.events, tree.path_of)
            fired = skipped = 0
            for entry in due:
                rule = entry.rule
                try:
                    res = rule.fire(ctx)
                except Exception as exc:  # a faulty rule must not take its siblings down
                    log.debug("rule %s raised", rule.rid, exc_info=True)
                    res = FireResult(False, error=f"{type(exc).__name__}: {exc}")
                if res.skipped:
                    skipped += 1
                    detail = {"error": res.error}
                    if res.failed_uri:
                        detail["uri"] = res.failed_uri
                    self.events.append(EventRecord(
                        SKIPPED, now, rule.rid, rule.class_name, rule.name, rule.suggestion,
                        entry.area_path, cache.values(sorted(rule.required_uris())), tick_id, detail))
                elif res.triggered:
                    fired += 1
            self.fired_total += fired
            return TickReport(tick_id, len(due), fired, skipped, time.perf_counter() - started)

    def run(self, stop: threading.Event, max_ticks: int | None = None) -> None:
        """Tick every ``self.tick`` seconds until ``stop`` is set.

        An overrunning tick delays the next one rather than overlapping it.
        """
        self.running = True
        deadline = time.monotonic()
        done = 0
        try:
            while not stop.is_set() and (max_ticks is None or done < max_ticks):
                report = self.run_tick()
                done += 1
                deadline += self.tick
                delay = deadline - time.monotonic()
                if delay < 0:
                    self.overruns += 1
                    log.warning("tick %d overran by %.3fs", report.tick_id, -delay)
                    deadline = time.monotonic()
                    delay = 0
                stop.wait(delay)
        finally:
            self.running = False

    def status(self) -> dict[str, Any]:
        with self._lock:
            return {
                "tickId": self.next_tick,
                "running": self.running,
                "ruleCount": len(self.tree),
                "discardedCount": self.last_stats.discarded_count if self.last_stats else 0,
                "firedTotal": self.fired_total,
                "overruns": self.overruns,
                "graphPath": self.graph_path,
                "lastLoad": self.last_stats.to_json() if self.last_stats else None,
            }
