"""REST management API over the graph file, plus engine control and event queries.

Routes::

    GET/POST          /v1/{collection}
    GET/PUT/DELETE    /v1/{collection}/{rid}
    POST              /v1/engine/reload
    GET               /v1/engine/status
    GET               /v1/events

``collection`` is one of areas, sensors, parameters, rules. Bodies are stored
vertex documents. Relations are given with link keys: ``@parent`` (areas and
rules), ``@covers``/``@gathers`` (sensors) and ``@gatheredBy`` (parameters).
"""

from __future__ import annotations

import copy
import json
import math
import os
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from fastapi import Body, FastAPI, Request
from fastapi.responses import JSONResponse, Response

from .engine import Engine, GraphInvalid
from .events import EVENT_KINDS, query_events, read_events
from .measurements import parse_rfc3339
from .model import (
    AREA, CHILD, CONTAINS, COVERS, GATHERS, HAS_RULE, PARAMETER, SENSOR, validate_graph,
)
from .store import (
    BASE_RULE_CLASS, GraphFormatError, SchemaRegistry, check_schema, parse_graph_document,
    save_document,
)

COLLECTIONS = {"areas": AREA, "sensors": SENSOR, "parameters": PARAMETER, "rules": BASE_RULE_CLASS}
CLUSTERS = {"areas": 10, "sensors": 11, "parameters": 12, "rules": 25}
LINK_KEYS = {
    "areas": ("@parent",),
    "rules": ("@parent",),
    "sensors": ("@covers", "@gathers"),
    "parameters": ("@gatheredBy",),
}


@dataclass
class ApiError(Exception):
    status: int
    code: str
    message: str
    violations: list[str] | None = field(default=None)

    def to_json(self) -> dict[str, Any]:
        doc: dict[str, Any] = {"status": self.status, "code": self.code, "message": self.message}
        if self.violations is not None:
            doc["violations"] = self.violations
        return doc


def _vertex_index(doc: dict) -> dict[str, dict]:
    return {v.get("@rid"): v for v in doc["vertices"]}


class GraphStore:
    """Single-writer, validate-before-commit access to a graph file.

    Works on the raw document so vertices the loader would exclude are kept
    on disk untouched. A mutation is refused when it introduces a structural
    or schema violation that was not already present.
    """

    def __init__(self, path: str | os.PathLike, schemas: SchemaRegistry):
        self.path = Path(path)
        self.schemas = schemas
        self._write = threading.Lock()

    def read(self) -> dict:
        try:
            doc = json.loads(self.path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            doc = {"vertices": [], "edges": []}
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise ApiError(500, "corrupt-store", f"graph file is unreadable: {exc}") from exc
        if not isinstance(doc, dict):
            raise ApiError(500, "corrupt-store", "graph file is not a JSON object")
        doc.setdefault("vertices", [])
        doc.setdefault("edges", [])
        return doc

    def _violations(self, doc: dict) -> set[str]:
        try:
            graph = parse_graph_document(doc, self.schemas)
        except GraphFormatError as exc:
            return {f"format: {exc}"}
        return {str(v) for v in validate_graph(graph)}

    # -- helpers -------------------------------------------------------------

    def _class_ok(self, collection: str, cls: Any) -> bool:
        want = COLLECTIONS[collection]
        if collection != "rules":
            return cls == want
        return isinstance(cls, str) and cls not in (AREA, SENSOR, PARAMETER)

    def _find(self, doc: dict, collection: str, rid: str) -> dict:
        index = _vertex_index(doc)
        for candidate in (rid, "#" + rid):
            v = index.get(candidate)
            if v is not None and self._class_ok(collection, v.get("@class")) \
                    and (collection != "rules" or v.get("@class") not in (AREA, SENSOR, PARAMETER)):
                return v
        raise ApiError(404, "not-found", f"no {collection[:-1]} with rid {rid!r}")

    def _new_rid(self, doc: dict, collection: str) -> str:
        cluster = CLUSTERS[collection]
        pat = re.compile(rf"^#{cluster}:(\d+)$")
        used = [int(m.group(1)) for v in doc["vertices"]
                if isinstance(v.get("@rid"), str) and (m := pat.match(v["@rid"]))]
        return f"#{cluster}:{max(used, default=-1) + 1}"

    def present(self, doc: dict, vertex: dict, collection: str) -> dict:
        """A stored vertex plus its link keys."""
        out = dict(vertex)
        rid = vertex["@rid"]
        edges = doc["edges"]
        if collection in ("areas", "rules"):
            labels = (CONTAINS,) if collection == "areas" else (HAS_RULE, CHILD)
            parent = next((e["from"] for e in edges if e["to"] == rid and e["label"] in labels), None)
            out["@parent"] = parent
        elif collection == "sensors":
            out["@covers"] = [e["to"] for e in edges if e["from"] == rid and e["label"] == COVERS]
            out["@gathers"] = [e["to"] for e in edges if e["from"] == rid and e["label"] == GATHERS]
        else:
            out["@gatheredBy"] = [e["from"] for e in edges if e["to"] == rid and e["label"] == GATHERS]
        return out

    def _link_edges(self, doc: dict, collection: str, rid: str, body: dict) -> tuple[list, set]:
        """Edges requested by the body's link keys, and the labels they replace."""
        index = _vertex_index(doc)
        new, replaced = [], set()
        if "@parent" in body and collection in ("areas", "rules"):
            parent = body["@parent"]
            if collection == "areas":
                replaced.add(CONTAINS)
                if parent is not None:
                    new.append({"from": parent, "to": rid, "label": CONTAINS})
            else:
                replaced.update((HAS_RULE, CHILD))
                pv = index.get(parent)
                if pv is None:
                    raise ApiError(422, "invalid-link", f"@parent {parent!r} does not exist")
                label = HAS_RULE if pv.get("@class") == AREA else CHILD
                new.append({"from": parent, "to": rid, "label": label})
        for key, label, outgoing in (("@covers", COVERS, True), ("@gathers", GATHERS, True),
                                     ("@gatheredBy", GATHERS, False)):
            if key in body and key in LINK_KEYS[collection]:
                targets = body[key]
                if not isinstance(targets, list):
                    raise ApiError(422, "invalid-link", f"{key} must be a list of rids")
                replaced.add((label, outgoing))
                for t in targets:
                    new.append({"from": rid, "to": t, "label": label} if outgoing
                               else {"from": t, "to": rid, "label": label})
        return new, replaced

    @staticmethod
    def _drop_links(edges: list, rid: str, replaced: set) -> list:
        def keep(e):
            for r in replaced:
                if isinstance(r, tuple):
                    label, outgoing = r
                    if e["label"] == label and e["from" if outgoing else "to"] == rid:
                        return False
                elif e["label"] == r and e["to"] == rid:
                    return False
            return True
        return [e for e in edges if keep(e)]

    def _commit(self, before: dict, after: dict, vertex: dict | None) -> None:
        problems = []
        if vertex is not None:
            problems += [str(v) for v in check_schema(vertex, self.schemas)]
        introduced = self._violations(after) - self._violations(before)
        problems += sorted(introduced)
        if problems:
            raise ApiError(422, "invalid-mutation", "mutation rejected", problems)
        save_document(after, self.path)

    # -- operations ----------------------------------------------------------

    def list(self, collection: str) -> list[dict]:
        doc = self.read()
        return [self.present(doc, v, collection) for v in doc["vertices"]
                if self._class_ok(collection, v.get("@class"))]

    def get(self, collection: str, rid: str) -> dict:
        doc = self.read()
        return self.present(doc, self._find(doc, collection, rid), collection)

    def _split(self, collection: str, body: Any) -> dict:
        if not isinstance(body, dict):
            raise ApiError(400, "bad-body", "body must be a JSON object")
        unknown = [k for k in body if k.startswith("@") and k not in ("@rid", "@class")
                   and k not in LINK_KEYS[collection]]
        if unknown:
            raise ApiError(422, "invalid-link", f"unsupported keys for {collection}: {unknown}")
        vertex = {k: v for k, v in body.items() if k not in LINK_KEYS[collection]}
        if collection != "rules":
            vertex.setdefault("@class", COLLECTIONS[collection])
        if not self._class_ok(collection, vertex.get("@class")):
            raise ApiError(422, "wrong-class", f"@class {vertex.get('@class')!r} does not belong in {collection}")
        return vertex

    def create(self, collection: str, body: Any) -> dict:
        vertex = self._split(collection, body)
        with self._write:
            before = self.read()
            after = copy.deepcopy(before)
            rid = vertex.get("@rid") or self._new_rid(before, collection)
            if rid in _vertex_index(before):
                raise ApiError(409, "duplicate-rid", f"rid {rid!r} already exists")
            vertex = {"@rid": rid, **{k: v for k, v in vertex.items() if k != "@rid"}}
            new, _ = self._link_edges(before, collection, rid, body)
            after["vertices"].append(vertex)
            after["edges"].extend(new)
            self._commit(before, after, vertex)
            return self.present(after, vertex, collection)

    def update(self, collection: str, rid: str, body: Any) -> dict:
        vertex = self._split(collection, body)
        with self._write:
            before = self.read()
            current = self._find(before, collection, rid)
            rid = current["@rid"]
            if vertex.get("@rid", rid) != rid:
                raise ApiError(422, "rid-mismatch", "@rid in body differs from the URL")
            vertex = {"@rid": rid, "@class": vertex.get("@class", current["@class"]),
                      **{k: v for k, v in vertex.items() if k not in ("@rid", "@class")}}
            new, replaced = self._link_edges(before, collection, rid, body)
            after = copy.deepcopy(before)
            after["vertices"] = [vertex if v.get("@rid") == rid else v for v in after["vertices"]]
            after["edges"] = self._drop_links(after["edges"], rid, replaced) + new
            self._commit(before, after, vertex)
            return self.present(after, vertex, collection)

    def delete(self, collection: str, rid: str, cascade: bool = False) -> list[str]:
        """Delete a vertex; with ``cascade`` also everything it structurally owns."""
        with self._write:
            before = self.read()
            rid = self._find(before, collection, rid)["@rid"]
            owned = (CONTAINS, HAS_RULE, CHILD)
            dependents = [e["to"] for e in before["edges"] if e["from"] == rid and e["label"] in owned]
            if dependents and not cascade:
                raise ApiError(409, "has-dependents",
                               f"{rid} owns {len(dependents)} vertices; use ?cascade=true",
                               dependents)
            doomed, stack = set(), [rid]
            while stack:
                r = stack.pop()
                if r in doomed:
                    continue
                doomed.add(r)
                stack.extend(e["to"] for e in before["edges"] if e["from"] == r and e["label"] in owned)
            after = copy.deepcopy(before)
            after["vertices"] = [v for v in after["vertices"] if v.get("@rid") not in doomed]
            after["edges"] = [e for e in after["edges"] if e["from"] not in doomed and e["to"] not in doomed]
            self._commit(before, after, None)
            return sorted(doomed)


def _parse_since(value: str) -> float:
    try:
        ts = float(value)
        if math.isfinite(ts):
            return ts
    except ValueError:
        pass
    try:
        return parse_rfc3339(value)
    except ValueError:
        raise ApiError(400, "bad-filter", f"since={value!r} is neither RFC 3339 nor epoch seconds") from None


def create_app(store: GraphStore, engine: Engine | None = None,
               event_log_path: str | os.PathLike | None = None) -> FastAPI:
    app = FastAPI(title="recommendation rule engine")

    @app.exception_handler(ApiError)
    async def _api_error(request: Request, exc: ApiError):
        return JSONResponse(exc.to_json(), status_code=exc.status)

    def check_collection(collection: str) -> None:
        if collection not in COLLECTIONS:
            raise ApiError(404, "unknown-collection", f"no collection {collection!r}")

    # Engine and event routes come first so "/v1/engine/..." never matches "/v1/{collection}/{rid}".
    @app.post("/v1/engine/reload")
    def reload():
        if engine is None:
            raise ApiError(503, "no-engine", "no engine attached to this API")
        try:
            stats = engine.load(store.path)
        except GraphInvalid as exc:
            raise ApiError(422, "invalid-graph", "persisted graph is invalid; keeping the old rules",
                           [str(v) for v in exc.violations]) from exc
        except (GraphFormatError, OSError) as exc:
            raise ApiError(422, "invalid-graph", str(exc)) from exc
        return stats.to_json()

    @app.get("/v1/engine/status")
    def status():
        if engine is None:
            raise ApiError(503, "no-engine", "no engine attached to this API")
        return engine.status()

    @app.get("/v1/events")
    def events(ruleRid: str | None = None, kind: str | None = None,
               since: str | None = None, limit: str = "100"):
        if kind is not None and kind not in EVENT_KINDS:
            raise ApiError(400, "bad-filter", f"kind must be one of {', '.join(EVENT_KINDS)}")
        try:
            n = int(limit)
        except ValueError:
            n = -1
        if n < 1:
            raise ApiError(400, "bad-filter", "limit must be a positive integer")
        t = _parse_since(since) if since is not None else None
        if event_log_path is None:
            return []
        try:
            records = read_events(event_log_path)
        except ValueError as exc:
            raise ApiError(500, "corrupt-log", str(exc)) from exc
        return [r.to_json() for r in query_events(records, rule_rid=ruleRid, kind=kind, since=t, limit=n)]

    @app.get("/v1/{collection}")
    def list_resources(collection: str):
        check_collection(collection)
        return store.list(collection)

    @app.post("/v1/{collection}", status_code=201)
    def create(collection: str, body: Any = Body(...)):
        check_collection(collection)
        return store.create(collection, body)

    @app.get("/v1/{collection}/{rid}")
    def get(collection: str, rid: str):
        check_collection(collection)
        return store.get(collection, rid)

    @app.put("/v1/{collection}/{rid}")
    def update(collection: str, rid: str, body: Any = Body(...)):
        check_collection(collection)
        return store.update(collection, rid, body)

    @app.delete("/v1/{collection}/{rid}")
    def delete(collection: str, rid: str, cascade: bool = False):
        check_collection(collection)
        store.delete(collection, rid, cascade)
        return Response(status_code=204)

    return app
