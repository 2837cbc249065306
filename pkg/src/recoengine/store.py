"""Document-graph file store with schema-hybrid class validation.

Classes declare typed fields (some mandatory) and inherit fields from their
parent class. Instances may carry any number of extra fields, which are kept
verbatim.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from .model import (
    AREA, PARAMETER, SENSOR, Edge, ResourceGraph, is_absolute_uri,
    vertex_from_document,
)

FIELD_TYPES = ("string", "number", "integer", "uri", "duration", "map")
BASE_RULE_CLASS = "Rule"


class SchemaError(ValueError):
    """Bad schema declaration (cyclic parents, conflicting field types, ...)."""


class GraphFormatError(ValueError):
    """The graph file cannot be parsed."""

    def __init__(self, message: str, path: str | os.PathLike | None = None,
                 line: int | None = None, column: int | None = None):
        loc = ""
        if path is not None:
            loc = f"{path}"
            if line is not None:
                loc += f":{line}:{column}"
            loc += ": "
        super().__init__(loc + message)
        self.path, self.line, self.column = path, line, column


@dataclass(frozen=True)
class FieldSpec:
    name: str
    type: str
    mandatory: bool = False

    def __post_init__(self):
        if self.type not in FIELD_TYPES:
            raise SchemaError(f"field {self.name!r}: unknown type {self.type!r}")


@dataclass(frozen=True)
class ClassSchema:
    name: str
    parent: str | None = None
    fields: tuple[FieldSpec, ...] = ()

    def to_document(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "parent": self.parent,
            "fields": [{"name": f.name, "type": f.type, "mandatory": f.mandatory} for f in self.fields],
        }

    @classmethod
    def from_document(cls, doc: Mapping[str, Any]) -> ClassSchema:
        try:
            fields = tuple(FieldSpec(f["name"], f["type"], bool(f.get("mandatory", False)))
                           for f in doc.get("fields", ()))
            return cls(doc["name"], doc.get("parent"), fields)
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed schema declaration: {doc!r}") from exc


def schema(class_name: str, parent: str | None = BASE_RULE_CLASS, /, **fields: str) -> ClassSchema:
    """Shorthand: ``schema("X", threshold="number*")``; a trailing ``*`` marks a field mandatory."""
    specs = tuple(FieldSpec(k, t.rstrip("*"), t.endswith("*")) for k, t in fields.items())
    return ClassSchema(class_name, parent, specs)


RESOURCE_SCHEMAS = (
    schema(AREA, None, name="string*", uri="uri"),
    schema(SENSOR, None, name="string*", uri="uri", samplingPeriod="duration*"),
    schema(PARAMETER, None, name="string*", uri="uri*", unit="string"),
)

BASE_RULE_SCHEMA = schema(
    BASE_RULE_CLASS, None,
    name="string*", description="string", suggestion="string*", uri="uri", period="duration",
)


@dataclass(frozen=True)
class FieldViolation:
    rid: str | None
    field: str | None
    problem: str

    def __str__(self) -> str:
        who = self.rid or "<no rid>"
        return f"{who}: {self.field}: {self.problem}" if self.field else f"{who}: {self.problem}"


class SchemaRegistry:
    """Class schemas by name, with inherited field resolution."""

    def __init__(self, schemas: Iterable[ClassSchema] = ()):
        self._schemas: dict[str, ClassSchema] = {}
        self._effective: dict[str, dict[str, FieldSpec]] = {}
        for s in schemas:
            self.add(s)

    def add(self, s: ClassSchema, *, replace: bool = False) -> None:
        if s.name in self._schemas and not replace:
            raise SchemaError(f"class {s.name!r} already declared")
        self._schemas[s.name] = s
        self._effective.clear()

    def __contains__(self, name: object) -> bool:
        return name in self._schemas

    def __getitem__(self, name: str) -> ClassSchema:
        return self._schemas[name]

    def __iter__(self):
        return iter(self._schemas.values())

    def copy(self) -> SchemaRegistry:
        return SchemaRegistry(self._schemas.values())

    def merged(self, extra: Iterable[ClassSchema]) -> SchemaRegistry:
        """A copy including ``extra``; schemas already present here win."""
        out = self.copy()
        for s in extra:
            if s.name not in out:
                out.add(s)
        return out

    def lineage(self, name: str) -> list[str]:
        """``[name, parent, grandparent, ...]``; raises SchemaError on cycles or gaps."""
        chain = []
        cur: str | None = name
        while cur is not None:
            if cur in chain:
                raise SchemaError(f"class hierarchy cycle: {' -> '.join(chain + [cur])}")
            if cur not in self._schemas:
                raise SchemaError(f"class {chain[-1] if chain else name!r} has undeclared parent {cur!r}")
            chain.append(cur)
            cur = self._schemas[cur].parent
        return chain

    def is_subclass(self, name: str, ancestor: str) -> bool:
        try:
            return ancestor in self.lineage(name)
        except SchemaError:
            return False

    def effective_fields(self, name: str) -> dict[str, FieldSpec]:
        cached = self._effective.get(name)
        if cached is not None:
            return cached
        out: dict[str, FieldSpec] = {}
        for cls in reversed(self.lineage(name)):
            for f in self._schemas[cls].fields:
                prev = out.get(f.name)
                if prev is not None and prev.type != f.type:
                    raise SchemaError(
                        f"class {cls!r} redeclares field {f.name!r} as {f.type} (inherited {prev.type})")
                # A subclass may tighten an optional field to mandatory, never loosen it.
                out[f.name] = FieldSpec(f.name, f.type, f.mandatory or (prev is not None and prev.mandatory))
        self._effective[name] = out
        return out


def _type_ok(kind: str, value: Any) -> bool:
    if kind == "string":
        return isinstance(value, str)
    if kind in ("number", "duration"):
        return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)
    if kind == "integer":
        return isinstance(value, int) and not isinstance(value, bool)
    if kind == "uri":
        return is_absolute_uri(value)
    if kind == "map":
        return isinstance(value, dict)
    return False


def check_schema(vertex: Mapping[str, Any], schemas: SchemaRegistry) -> list[FieldViolation]:
    """Mandatory-field presence and field types for one stored vertex.

    Fields not declared by the class are extension fields and never violate.
    """
    rid = vertex.get("@rid")
    out = []
    if not isinstance(rid, str) or not rid:
        out.append(FieldViolation(None, "@rid", "missing or empty @rid"))
    cls = vertex.get("@class")
    if not isinstance(cls, str) or not cls:
        out.append(FieldViolation(rid, "@class", "missing or empty @class"))
        return out
    if cls not in schemas:
        return out + [FieldViolation(rid, "@class", f"unknown class {cls!r}")]
    try:
        fields = schemas.effective_fields(cls)
    except SchemaError as exc:
        return out + [FieldViolation(rid, "@class", str(exc))]
    for spec in fields.values():
        if spec.name not in vertex or vertex[spec.name] is None:
            if spec.mandatory:
                out.append(FieldViolation(rid, spec.name, "missing mandatory field"))
            continue
        if not _type_ok(spec.type, vertex[spec.name]):
            out.append(FieldViolation(rid, spec.name, f"expected {spec.type}, got {vertex[spec.name]!r}"))
    return out


@dataclass(frozen=True)
class Diagnostic:
    """A vertex excluded at load time, with the edges that touched it."""

    rid: str | None
    class_name: str | None
    violations: tuple[FieldViolation, ...]
    dropped_edges: tuple[Edge, ...] = field(default=())

    @property
    def fields(self) -> list[str]:
        return [v.field for v in self.violations if v.field]


def default_schemas() -> SchemaRegistry:
    from .rules import default_registry
    return default_registry().schemas


def parse_graph_document(doc: Any, schemas: SchemaRegistry | None = None,
                         source: str | os.PathLike | None = None) -> ResourceGraph:
    """Build a ResourceGraph from an already-decoded graph document."""
    if not isinstance(doc, dict) or not isinstance(doc.get("vertices"), list) \
            or not isinstance(doc.get("edges"), list):
        raise GraphFormatError('expected an object with "vertices" and "edges" arrays', source)
    try:
        file_schemas = tuple(ClassSchema.from_document(s) for s in doc.get("schemas", ()))
    except SchemaError as exc:
        raise GraphFormatError(str(exc), source) from exc
    registry = schemas if schemas is not None else default_schemas()
    if file_schemas:
        registry = registry.merged(file_schemas)

    kept, excluded = [], {}
    for i, raw in enumerate(doc["vertices"]):
        if not isinstance(raw, dict):
            raise GraphFormatError(f"vertex #{i} is not an object", source)
        problems = check_schema(raw, registry)
        if problems:
            excluded[raw.get("@rid")] = (raw.get("@class"), problems)
        else:
            kept.append(vertex_from_document(raw))

    edges, dropped = [], {}
    for i, raw in enumerate(doc["edges"]):
        try:
            e = Edge(raw["from"], raw["to"], raw["label"])
        except (KeyError, TypeError) as exc:
            raise GraphFormatError(f"edge #{i} must have from/to/label", source) from exc
        hit = [r for r in (e.src, e.dst) if r in excluded]
        if hit:
            for r in hit:
                dropped.setdefault(r, []).append(e)
        else:
            edges.append(e)

    diagnostics = tuple(
        Diagnostic(rid, cls, tuple(problems), tuple(dropped.get(rid, ())))
        for rid, (cls, problems) in excluded.items()
    )
    return ResourceGraph(tuple(kept), tuple(edges), file_schemas, diagnostics)


def load_graph(path: str | os.PathLike, schemas: SchemaRegistry | None = None) -> ResourceGraph:
    """Read a graph file. Vertices failing ``check_schema`` are excluded and reported
    in ``graph.diagnostics``; a malformed file raises GraphFormatError."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise GraphFormatError(f"not UTF-8: {exc}", path) from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphFormatError(exc.msg, path, exc.lineno, exc.colno) from exc
    return parse_graph_document(doc, schemas, path)


def dumps_document(doc: Any) -> str:
    return json.dumps(doc, indent=1, ensure_ascii=False) + "\n"


def dumps_graph(graph: ResourceGraph) -> str:
    return dumps_document(graph.to_document())


def save_document(doc: Any, path: str | os.PathLike) -> None:
    """Write a graph document atomically (temp file in the same directory, then rename)."""
    path = Path(path)
    data = dumps_document(doc).encode("utf-8")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def save_graph(graph: ResourceGraph, path: str | os.PathLike) -> None:
    save_document(graph.to_document(), path)
