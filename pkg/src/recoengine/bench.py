"""Load/instantiation scaling benchmark.

Random school graphs are grown breadth-first: each Area gets up to
``rules_per_area`` rules and ``branching`` child Areas until the target rule
count is reached. Rules alternate between a RandomRule and a RepeatingRule
wrapping a RandomRule; such a pair counts as one rule.
"""

from __future__ import annotations

import csv
import gc
import io
import os
import platform
import random
import statistics
import tempfile
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

from .engine import build_tree, load_and_build
from .model import CHILD, CONTAINS, HAS_RULE, Area, Edge, ResourceGraph, RuleRecord
from .rules import RuleRegistry, default_registry
from .store import load_graph, save_graph

PAPER_SIZES = (100, 200, 400, 800, 1600, 3200, 6400, 12800)
CSV_COLUMNS = ("size", "mean_total_ms", "std_total_ms", "mean_inst_ms", "std_inst_ms")
WARMUP = 3


class BenchConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BenchSpec:
    sizes: tuple[int, ...] = PAPER_SIZES
    iterations: int = 100
    branching: int = 3
    rules_per_area: int = 5
    seed: int = 0

    def __post_init__(self):
        if not self.sizes or any(b <= a for a, b in zip(self.sizes, self.sizes[1:])):
            raise BenchConfigError("sizes must be non-empty and strictly increasing")
        if self.sizes[0] < 1:
            raise BenchConfigError("sizes must be >= 1")
        if self.iterations < 1:
            raise BenchConfigError("iterations must be >= 1")


@dataclass(frozen=True)
class BenchRow:
    size: int
    mean_total_ms: float
    std_total_ms: float | None
    mean_inst_ms: float
    std_inst_ms: float | None


@dataclass
class BenchReport:
    rows: list[BenchRow]
    environment: str = field(default_factory=lambda: machine_descriptor())

    def to_csv(self, long: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if long:
            w.writerow(("size", "metric", "mean_ms", "std_ms"))
            for r in self.rows:
                w.writerow((r.size, "total_time", _fmt(r.mean_total_ms), _fmt(r.std_total_ms)))
                w.writerow((r.size, "instantiation_time", _fmt(r.mean_inst_ms), _fmt(r.std_inst_ms)))
        else:
            w.writerow(CSV_COLUMNS)
            for r in self.rows:
                w.writerow((r.size, _fmt(r.mean_total_ms), _fmt(r.std_total_ms),
                            _fmt(r.mean_inst_ms), _fmt(r.std_inst_ms)))
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> BenchReport:
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise BenchConfigError(f"expected CSV columns {','.join(CSV_COLUMNS)}")
        rows = [BenchRow(int(d["size"]), float(d["mean_total_ms"]), _opt(d["std_total_ms"]),
                         float(d["mean_inst_ms"]), _opt(d["std_inst_ms"])) for d in reader]
        return cls(rows, environment="")


def _fmt(x: float | None) -> str:
    return "" if x is None else repr(x)


def _opt(s: str) -> float | None:
    return float(s) if s else None


def machine_descriptor() -> str:
    return (f"{platform.node()} {platform.machine()} {platform.processor() or '?'} "
            f"cpus={os.cpu_count()} {platform.python_implementation()} {platform.python_version()}")


def generate_graph(target_rules: int, branching: int = 3, rules_per_area: int = 5,
                   seed: int = 0) -> ResourceGraph:
    """A valid random graph with exactly ``target_rules`` Area-attached rules."""
    if target_rules < 1:
        raise BenchConfigError("target_rules must be >= 1")
    if rules_per_area < 1 or branching < 1:
        raise BenchConfigError("branching and rules_per_area must be >= 1")
    rng = random.Random(seed)
    vertices: list = []
    edges: list[Edge] = []
    n_areas = n_rules = n_inner = 0

    def new_area(parent: str | None) -> str:
        nonlocal n_areas
        rid = f"#10:{n_areas}"
        vertices.append(Area(rid, f"Area {n_areas}", f"http://bench.local/areas/{n_areas}"))
        if parent is not None:
            edges.append(Edge(parent, rid, CONTAINS))
        n_areas += 1
        return rid

    def simple(rid: str, label: str) -> RuleRecord:
        return RuleRecord(rid, "RandomRule", {
            "name": label, "suggestion": f"suggestion for {label}",
            "probability": round(rng.random(), 6), "seed": rng.randrange(2**31)})

    queue = deque([new_area(None)])
    while n_rules < target_rules:
        area = queue.popleft()
        for _ in range(min(rules_per_area, target_rules - n_rules)):
            rid = f"#20:{n_rules}"
            if n_rules % 2 == 0:
                vertices.append(simple(rid, f"Random {n_rules}"))
            else:
                vertices.append(RuleRecord(rid, "RepeatingRule", {
                    "name": f"Repeating {n_rules}", "suggestion": f"suggestion for Repeating {n_rules}",
                    "window_duration": 60, "min_occurrences": 3}))
                inner = f"#21:{n_inner}"
                n_inner += 1
                vertices.append(simple(inner, f"Random {n_rules} (inner)"))
                edges.append(Edge(rid, inner, CHILD))
            edges.append(Edge(area, rid, HAS_RULE))
            n_rules += 1
        if n_rules < target_rules:
            queue.extend(new_area(area) for _ in range(branching))
    return ResourceGraph(tuple(vertices), tuple(edges))


def _ms(samples: list[float]) -> tuple[float, float | None]:
    mean = statistics.fmean(samples) * 1000.0
    std = statistics.stdev(samples) * 1000.0 if len(samples) > 1 else None
    return mean, std


def time_once(path: str | os.PathLike, parsed: ResourceGraph,
              registry: RuleRegistry) -> tuple[float, float]:
    """One (total_time, instantiation_time) sample in seconds.

    total_time parses the file from scratch; instantiation_time builds the
    rules from ``parsed``. The cyclic GC is paused inside the timed regions so
    collections triggered by earlier allocations do not land in a random sample.
    """
    gc.collect()
    gc.disable()
    try:
        _, stats = load_and_build(path, registry)
        t0 = time.perf_counter()
        build_tree(parsed, registry, now=0.0)
        inst = time.perf_counter() - t0
    finally:
        gc.enable()
    return stats.total_time, inst


def run_bench(spec: BenchSpec, workdir: str | os.PathLike | None = None,
              registry: RuleRegistry | None = None, progress=None) -> BenchReport:
    """Time every size ``spec.iterations`` times.

    Iterations are interleaved round-robin over the sizes, so a burst of
    background load spreads over all rows instead of skewing one doubling step.
    """
    registry = registry or default_registry()
    with tempfile.TemporaryDirectory() as tmp:
        base = Path(workdir) if workdir is not None else Path(tmp)
        base.mkdir(parents=True, exist_ok=True)
        paths, parsed = {}, {}
        for size in spec.sizes:
            paths[size] = base / f"bench-{size}-seed{spec.seed}.json"
            save_graph(generate_graph(size, spec.branching, spec.rules_per_area, spec.seed), paths[size])
            parsed[size] = load_graph(paths[size], registry.schemas)
            for _ in range(WARMUP):
                time_once(paths[size], parsed[size], registry)
        samples: dict[int, tuple[list[float], list[float]]] = {n: ([], []) for n in spec.sizes}
        for _ in range(spec.iterations):
            for size in spec.sizes:
                total, inst = time_once(paths[size], parsed[size], registry)
                samples[size][0].append(total)
                samples[size][1].append(inst)
    rows = []
    for size in spec.sizes:
        mt, st = _ms(samples[size][0])
        mi, si = _ms(samples[size][1])
        rows.append(BenchRow(size, mt, st, mi, si))
        if progress is not None:
            progress(rows[-1])
    return BenchReport(rows)


@dataclass(frozen=True)
class ScalingStep:
    metric: str
    size: int
    next_size: int
    ratio: float
    passed: bool


def check_scaling(report: BenchReport, factor: float = 2.5) -> list[ScalingStep]:
    """Per doubling step, ``mean(2N) <= factor * mean(N)`` for both metrics."""
    rows = report.rows
    for a, b in zip(rows, rows[1:]):
        if b.size != 2 * a.size:
            raise BenchConfigError(f"sizes {a.size} -> {b.size} are not a doubling step")
    steps = []
    for metric, attr in (("total_time", "mean_total_ms"), ("instantiation_time", "mean_inst_ms")):
        for a, b in zip(rows, rows[1:]):
            x, y = getattr(a, attr), getattr(b, attr)
            ratio = y / x if x > 0 else float("inf")
            steps.append(ScalingStep(metric, a.size, b.size, ratio, y <= factor * x))
    return steps
