"""Resource graph: Areas, Sensors, Parameters and rule records linked by labeled edges.

Graphs are immutable snapshots. Mutating helpers return a new graph.
"""

from __future__ import annotations

import re
from collections import defaultdict, deque
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Any, Iterable, Iterator, Union
from urllib.parse import urlsplit

AREA = "Area"
SENSOR = "Sensor"
PARAMETER = "Parameter"
RESOURCE_CLASSES = (AREA, SENSOR, PARAMETER)

CONTAINS = "contains"
COVERS = "covers"
GATHERS = "gathers"
HAS_RULE = "hasRule"
CHILD = "child"
EDGE_LABELS = (CONTAINS, COVERS, GATHERS, HAS_RULE, CHILD)

_SCHEME = re.compile(r"^[A-Za-z][A-Za-z0-9+.\-]*:")


def is_absolute_uri(value: Any) -> bool:
    """True for strings like ``http://host/path`` or ``urn:rule:1``."""
    if not isinstance(value, str) or not _SCHEME.match(value):
        return False
    if any(c.isspace() for c in value):
        return False
    parts = urlsplit(value)
    if parts.scheme.lower() in ("http", "https", "ws", "wss"):
        return bool(parts.netloc)
    return bool(value[len(parts.scheme) + 1:])


@dataclass(frozen=True)
class Area:
    rid: str
    name: str
    uri: str | None = None
    attributes: dict[str, Any] = field(default_factory=dict)

    class_name = AREA


@dataclass(frozen=True)
class Sensor:
    rid: str
    name: str
    sampling_period: float
    uri: str | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    class_name = SENSOR


@dataclass(frozen=True)
class Parameter:
    rid: str
    name: str
    uri: str
    unit: str | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    class_name = PARAMETER


@dataclass(frozen=True)
class RuleRecord:
    """A persisted rule vertex: its ``@class`` plus every stored field."""

    rid: str
    class_name: str
    fields: dict[str, Any] = field(default_factory=dict)

    @property
    def uri(self) -> str | None:
        return self.fields.get("uri")

    @property
    def name(self) -> str | None:
        return self.fields.get("name")


Vertex = Union[Area, Sensor, Parameter, RuleRecord]


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    label: str

    def to_document(self) -> dict[str, str]:
        return {"from": self.src, "to": self.dst, "label": self.label}


def vertex_to_document(vertex: Vertex) -> dict[str, Any]:
    """Flatten a vertex into its stored form (``@rid``/``@class`` plus fields)."""
    doc: dict[str, Any] = {"@rid": vertex.rid, "@class": vertex.class_name}
    if isinstance(vertex, RuleRecord):
        doc.update(vertex.fields)
        return doc
    doc["name"] = vertex.name
    if vertex.uri is not None:
        doc["uri"] = vertex.uri
    if isinstance(vertex, Area):
        doc.update(vertex.attributes)
    elif isinstance(vertex, Sensor):
        doc["samplingPeriod"] = vertex.sampling_period
        doc.update(vertex.extra)
    else:
        if vertex.unit is not None:
            doc["unit"] = vertex.unit
        doc.update(vertex.extra)
    return doc


def vertex_from_document(doc: dict[str, Any]) -> Vertex:
    """Inverse of :func:`vertex_to_document`. Assumes the document passed schema checks."""
    rest = {k: v for k, v in doc.items() if k not in ("@rid", "@class")}
    rid, cls = doc["@rid"], doc["@class"]
    if cls == AREA:
        name = rest.pop("name")
        uri = rest.pop("uri", None)
        return Area(rid, name, uri, rest)
    if cls == SENSOR:
        name = rest.pop("name")
        period = rest.pop("samplingPeriod")
        uri = rest.pop("uri", None)
        return Sensor(rid, name, period, uri, rest)
    if cls == PARAMETER:
        name = rest.pop("name")
        uri = rest.pop("uri")
        unit = rest.pop("unit", None)
        return Parameter(rid, name, uri, unit, rest)
    return RuleRecord(rid, cls, rest)


@dataclass(frozen=True)
class Violation:
    code: str
    message: str
    rids: tuple[str, ...] = ()

    def __str__(self) -> str:
        where = f" [{', '.join(self.rids)}]" if self.rids else ""
        return f"{self.code}: {self.message}{where}"


@dataclass(frozen=True)
class ResourceGraph:
    vertices: tuple[Vertex, ...] = ()
    edges: tuple[Edge, ...] = ()
    # Schema declarations carried by the graph file itself.
    schemas: tuple[Any, ...] = ()
    # Load-time diagnostics for excluded vertices; not part of graph identity.
    diagnostics: tuple[Any, ...] = field(default=(), compare=False)

    @cached_property
    def _index(self) -> dict[str, Vertex]:
        return {v.rid: v for v in self.vertices}

    @cached_property
    def _out(self) -> dict[str, list[Edge]]:
        out: dict[str, list[Edge]] = defaultdict(list)
        for e in self.edges:
            out[e.src].append(e)
        return out

    @cached_property
    def _in(self) -> dict[str, list[Edge]]:
        inc: dict[str, list[Edge]] = defaultdict(list)
        for e in self.edges:
            inc[e.dst].append(e)
        return inc

    def __contains__(self, rid: object) -> bool:
        return rid in self._index

    def vertex(self, rid: str) -> Vertex:
        try:
            return self._index[rid]
        except KeyError:
            raise LookupError(f"unknown rid {rid!r}") from None

    def get(self, rid: str) -> Vertex | None:
        return self._index.get(rid)

    def out_edges(self, rid: str, label: str | None = None) -> list[Edge]:
        return [e for e in self._out.get(rid, ()) if label is None or e.label == label]

    def in_edges(self, rid: str, label: str | None = None) -> list[Edge]:
        return [e for e in self._in.get(rid, ()) if label is None or e.label == label]

    def children(self, rid: str, label: str) -> list[str]:
        return [e.dst for e in self.out_edges(rid, label)]

    def of_type(self, kind: type) -> Iterator[Any]:
        return (v for v in self.vertices if isinstance(v, kind))

    @property
    def areas(self) -> list[Area]:
        return list(self.of_type(Area))

    @property
    def rules(self) -> list[RuleRecord]:
        return list(self.of_type(RuleRecord))

    def root(self) -> Area | None:
        roots = [a for a in self.of_type(Area) if not self.in_edges(a.rid, CONTAINS)]
        return roots[0] if len(roots) == 1 else None

    def with_vertex(self, vertex: Vertex, edges: Iterable[Edge] = ()) -> ResourceGraph:
        """Add or replace ``vertex`` (replacement keeps its position) and append ``edges``."""
        if vertex.rid in self._index:
            vs = tuple(vertex if v.rid == vertex.rid else v for v in self.vertices)
        else:
            vs = self.vertices + (vertex,)
        return replace(self, vertices=vs, edges=self.edges + tuple(edges), diagnostics=())

    def without_vertex(self, rid: str) -> ResourceGraph:
        vs = tuple(v for v in self.vertices if v.rid != rid)
        es = tuple(e for e in self.edges if rid not in (e.src, e.dst))
        return replace(self, vertices=vs, edges=es, diagnostics=())

    def with_edges(self, add: Iterable[Edge] = (), remove: Iterable[Edge] = ()) -> ResourceGraph:
        drop = set(remove)
        es = tuple(e for e in self.edges if e not in drop) + tuple(add)
        return replace(self, edges=es, diagnostics=())

    def to_document(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "vertices": [vertex_to_document(v) for v in self.vertices],
            "edges": [e.to_document() for e in self.edges],
        }
        if self.schemas:
            doc["schemas"] = [s.to_document() for s in self.schemas]
        return doc


# Allowed (source class, target class) per edge label.
_EDGE_ENDS = {
    CONTAINS: (Area, Area),
    COVERS: (Sensor, Area),
    GATHERS: (Sensor, Parameter),
    HAS_RULE: (Area, RuleRecord),
    CHILD: (RuleRecord, RuleRecord),
}


def _find_cycles(nodes: Iterable[str], succ: dict[str, list[str]]) -> list[list[str]]:
    """Return one representative cycle per strongly-connected loop found by DFS."""
    WHITE, GREY, BLACK = 0, 1, 2
    color: dict[str, int] = defaultdict(int)
    cycles = []
    for start in nodes:
        if color[start] != WHITE:
            continue
        stack = [(start, iter(succ.get(start, ())))]
        path = [start]
        color[start] = GREY
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                stack.pop()
                path.pop()
                color[node] = BLACK
            elif color[nxt] == GREY:
                cycles.append(path[path.index(nxt):] + [nxt])
            elif color[nxt] == WHITE:
                color[nxt] = GREY
                path.append(nxt)
                stack.append((nxt, iter(succ.get(nxt, ()))))
    return cycles


def validate_graph(graph: ResourceGraph) -> list[Violation]:
    """Check the structural invariants of ``graph``; empty list iff well-formed."""
    out: list[Violation] = []
    seen: set[str] = set()
    for v in graph.vertices:
        if v.rid in seen:
            out.append(Violation("duplicate-rid", "rid used by more than one vertex", (v.rid,)))
        seen.add(v.rid)
        if v.uri is not None and not is_absolute_uri(v.uri):
            out.append(Violation("invalid-uri", f"not an absolute URI: {v.uri!r}", (v.rid,)))
        if isinstance(v, Parameter) and not v.uri:
            out.append(Violation("missing-uri", "Parameter requires a uri", (v.rid,)))
        if isinstance(v, Sensor) and not (v.sampling_period > 0):
            out.append(Violation("sampling-period", "samplingPeriod must be > 0", (v.rid,)))
        if isinstance(v, RuleRecord) and not v.class_name:
            out.append(Violation("empty-class", "rule record has an empty @class", (v.rid,)))

    good_edges: list[Edge] = []
    for e in graph.edges:
        if e.label not in _EDGE_ENDS:
            out.append(Violation("edge-label", f"unknown edge label {e.label!r}", (e.src, e.dst)))
            continue
        src, dst = graph.get(e.src), graph.get(e.dst)
        if src is None or dst is None:
            missing = tuple(r for r, v in ((e.src, src), (e.dst, dst)) if v is None)
            out.append(Violation("dangling-edge", f"{e.label} edge references unknown vertex", missing))
            continue
        want_src, want_dst = _EDGE_ENDS[e.label]
        if not (isinstance(src, want_src) and isinstance(dst, want_dst)):
            out.append(Violation(
                "edge-endpoints",
                f"{e.label} must connect {want_src.__name__}->{want_dst.__name__}",
                (e.src, e.dst)))
            continue
        good_edges.append(e)

    contains: dict[str, list[str]] = defaultdict(list)
    child: dict[str, list[str]] = defaultdict(list)
    for e in good_edges:
        if e.label == CONTAINS:
            contains[e.src].append(e.dst)
        elif e.label == CHILD:
            child[e.src].append(e.dst)

    area_ids = [a.rid for a in graph.of_type(Area)]
    for cyc in _find_cycles(area_ids, contains):
        out.append(Violation("contains-cycle", "containment cycle " + " -> ".join(cyc), tuple(cyc[:-1])))
    parents: dict[str, int] = defaultdict(int)
    for dsts in contains.values():
        for d in dsts:
            parents[d] += 1
    for rid, n in parents.items():
        if n > 1:
            out.append(Violation("multiple-parents", f"Area contained by {n} Areas", (rid,)))
    roots = [r for r in area_ids if parents[r] == 0]
    if area_ids and len(roots) != 1:
        out.append(Violation("root-count", f"expected exactly one root Area, found {len(roots)}", tuple(roots)))

    rule_ids = [r.rid for r in graph.of_type(RuleRecord)]
    cyclic: set[str] = set()
    for cyc in _find_cycles(rule_ids, child):
        cyclic.update(cyc)
        out.append(Violation("child-cycle", "rule child cycle " + " -> ".join(cyc), tuple(cyc[:-1])))

    # Count attachment paths (hasRule then child*) per rule.
    paths: dict[str, int] = defaultdict(int)
    indeg: dict[str, int] = defaultdict(int)
    for dsts in child.values():
        for d in dsts:
            indeg[d] += 1
    for e in good_edges:
        if e.label == HAS_RULE:
            paths[e.dst] += 1
    queue = deque(r for r in rule_ids if indeg[r] == 0)
    while queue:
        r = queue.popleft()
        for d in child.get(r, ()):
            paths[d] += paths[r]
            indeg[d] -= 1
            if indeg[d] == 0:
                queue.append(d)
    for r in rule_ids:
        if r in cyclic:
            continue
        if paths[r] == 0:
            out.append(Violation("unattached-rule", "rule is not reachable from any Area", (r,)))
        elif paths[r] > 1:
            out.append(Violation("multiple-attachment", f"rule reachable by {paths[r]} paths", (r,)))
    return out


def owning_area(graph: ResourceGraph, rid: str) -> str | None:
    """The rid of the Area a resource belongs to, or None when unattached."""
    v = graph.vertex(rid)
    seen = set()
    while rid not in seen:
        seen.add(rid)
        if isinstance(v, Area):
            return rid
        if isinstance(v, RuleRecord):
            inc = graph.in_edges(rid, HAS_RULE) or graph.in_edges(rid, CHILD)
        elif isinstance(v, Sensor):
            inc = [Edge(e.dst, e.src, e.label) for e in graph.out_edges(rid, COVERS)]
        else:
            inc = graph.in_edges(rid, GATHERS)
        if not inc:
            return None
        rid = inc[0].src
        v = graph.vertex(rid)
    return None


def area_path(graph: ResourceGraph, rid: str) -> list[str]:
    """Names of the Areas from the root down to the Area owning ``rid``.

    Raises LookupError for an unknown rid; returns ``[]`` for a resource that
    is not attached to any Area.
    """
    area = owning_area(graph, rid)
    names: list[str] = []
    seen = set()
    while area is not None and area not in seen:
        seen.add(area)
        names.append(graph.vertex(area).name)
        up = graph.in_edges(area, CONTAINS)
        area = up[0].src if up else None
    names.reverse()
    return names
