import json
import os

import pytest
from hypothesis import given, settings, strategies as st

from recoengine.model import HAS_RULE, Area, Edge, Parameter, ResourceGraph, RuleRecord, Sensor
from recoengine.samples import comfort_index_document
from recoengine.store import (
    BASE_RULE_CLASS, ClassSchema, GraphFormatError, SchemaError, SchemaRegistry, check_schema,
    dumps_graph, load_graph, parse_graph_document, save_document, save_graph, schema,
)


@pytest.fixture
def schemas(registry):
    return registry.schemas


def write(tmp_path, doc, name="g.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc), encoding="utf-8")
    return p


def test_comfort_vertex_checks_clean(schemas):
    assert check_schema(comfort_index_document(), schemas) == []


def test_threshold_as_string_is_one_type_violation(schemas):
    doc = comfort_index_document() | {"threshold": "32"}
    vs = check_schema(doc, schemas)
    assert [(v.field, v.problem.startswith("expected number")) for v in vs] == [("threshold", True)]


def test_inherited_mandatory_suggestion(schemas):
    doc = comfort_index_document()
    del doc["suggestion"]
    vs = check_schema(doc, schemas)
    assert [v.field for v in vs] == ["suggestion"]


def test_description_is_optional(schemas):
    doc = comfort_index_document()
    del doc["description"]
    assert check_schema(doc, schemas) == []


def test_null_counts_as_missing(schemas):
    doc = comfort_index_document() | {"threshold": None}
    assert [v.field for v in check_schema(doc, schemas)] == ["threshold"]


def test_unknown_class(schemas):
    doc = comfort_index_document() | {"@class": "NoSuchRule"}
    vs = check_schema(doc, schemas)
    assert len(vs) == 1 and "unknown class" in vs[0].problem


def test_comfort_file_loads_one_record_with_eight_fields(tmp_path, schemas):
    p = write(tmp_path, {"vertices": [comfort_index_document()], "edges": []})
    g = load_graph(p, schemas)
    assert len(g.vertices) == 1
    rec = g.vertices[0]
    assert isinstance(rec, RuleRecord)
    assert 2 + len(rec.fields) == 8
    assert rec.fields["threshold"] == 32 and rec.fields["suggestion"] == "Open the window"


def test_empty_graph(tmp_path, schemas):
    g = load_graph(write(tmp_path, {"vertices": [], "edges": []}), schemas)
    assert g == ResourceGraph()


def test_missing_class_is_excluded_with_diagnostic(tmp_path, schemas):
    doc = {"vertices": [{"@rid": "#10:0", "@class": "Area", "name": "root"},
                        {"@rid": "#25:1", "name": "orphan"}],
           "edges": [{"from": "#10:0", "to": "#25:1", "label": HAS_RULE}]}
    g = load_graph(write(tmp_path, doc), schemas)
    assert [v.rid for v in g.vertices] == ["#10:0"]
    assert g.edges == ()
    (d,) = g.diagnostics
    assert d.rid == "#25:1" and d.fields == ["@class"]
    assert d.dropped_edges == (Edge("#10:0", "#25:1", HAS_RULE),)


@pytest.mark.parametrize("text", ["{", "[]", '{"vertices": {}}', '{"vertices": [1], "edges": []}'])
def test_malformed_files(tmp_path, schemas, text):
    p = tmp_path / "bad.json"
    p.write_text(text)
    with pytest.raises(GraphFormatError):
        load_graph(p, schemas)


def test_syntax_error_carries_position(tmp_path, schemas):
    p = tmp_path / "bad.json"
    p.write_text('{"vertices": [\n  {"@rid": }\n]}')
    with pytest.raises(GraphFormatError) as ei:
        load_graph(p, schemas)
    assert ei.value.line == 2


def test_round_trip_school(tmp_path, school, schemas):
    p = tmp_path / "s.json"
    save_graph(school, p)
    assert load_graph(p, schemas) == school


def test_round_trip_extension_field(tmp_path, school, schemas):
    g = school.with_vertex(Area("#10:9", "Annex", None, {"note": "west wing"}),
                           [Edge("#10:0", "#10:9", "contains")])
    p = tmp_path / "s.json"
    save_graph(g, p)
    back = load_graph(p, schemas)
    assert back.vertex("#10:9").attributes == {"note": "west wing"}
    assert json.loads(p.read_text())["vertices"][-1]["note"] == "west wing"


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_save_to_read_only_dir(tmp_path, school):
    d = tmp_path / "ro"
    d.mkdir()
    d.chmod(0o500)
    try:
        with pytest.raises(OSError):
            save_graph(school, d / "g.json")
    finally:
        d.chmod(0o700)


def test_save_to_unwritable_path(tmp_path, school):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        save_graph(school, blocker / "g.json")


def test_save_leaves_old_file_on_failure(tmp_path):
    p = tmp_path / "g.json"
    save_document({"vertices": [], "edges": []}, p)
    with pytest.raises(TypeError):
        save_document({"vertices": [object()], "edges": []}, p)
    assert json.loads(p.read_text()) == {"vertices": [], "edges": []}
    assert [f.name for f in tmp_path.iterdir()] == ["g.json"]


# -- schema registry -----------------------------------------------------------

def test_inheritance_and_redeclaration():
    reg = SchemaRegistry([schema(BASE_RULE_CLASS, None, name="string*")])
    reg.add(schema("Mid", BASE_RULE_CLASS, level="number"))
    reg.add(schema("Leaf", "Mid", level="number*", extra="string"))
    eff = reg.effective_fields("Leaf")
    assert set(eff) == {"name", "level", "extra"}
    assert eff["level"].mandatory
    assert reg.lineage("Leaf") == ["Leaf", "Mid", BASE_RULE_CLASS]
    reg.add(schema("Bad", "Mid", level="string"))
    with pytest.raises(SchemaError):
        reg.effective_fields("Bad")


def test_schema_cycle_and_unknown_parent():
    reg = SchemaRegistry([schema("A", "B"), schema("B", "A")])
    with pytest.raises(SchemaError):
        reg.lineage("A")
    with pytest.raises(SchemaError):
        SchemaRegistry([schema("C", "Missing")]).lineage("C")


def test_schema_document_round_trip():
    s = schema("ComfortIndex", BASE_RULE_CLASS, temperature_uri="uri*", threshold="number*", note="string")
    assert ClassSchema.from_document(s.to_document()) == s


def test_file_declared_class(tmp_path, schemas):
    doc = {
        "schemas": [schema("Custom", BASE_RULE_CLASS, level="integer*").to_document()],
        "vertices": [{"@rid": "#10:0", "@class": "Area", "name": "root"},
                     {"@rid": "#25:1", "@class": "Custom", "name": "c", "suggestion": "s", "level": 3},
                     {"@rid": "#25:2", "@class": "Custom", "name": "c", "suggestion": "s", "level": 2.5}],
        "edges": [],
    }
    g = load_graph(write(tmp_path, doc), schemas)
    assert [v.rid for v in g.vertices] == ["#10:0", "#25:1"]
    assert [d.rid for d in g.diagnostics] == ["#25:2"]


def test_monotone_in_inheritance(schemas):
    # Every rule class inherits the base mandatory fields.
    for name in schemas:
        if name == BASE_RULE_CLASS or not schemas.is_subclass(name, BASE_RULE_CLASS):
            continue
        fields = {"@rid": "#1", "@class": name}
        assert {"name", "suggestion"} <= {v.field for v in check_schema(fields, schemas)}


# -- property tests --------------------------------------------------------------

text = st.text(st.characters(blacklist_categories=("Cs",)), max_size=12)
json_scalar = st.one_of(text, st.integers(-10**6, 10**6), st.booleans(),
                        st.floats(allow_nan=False, allow_infinity=False, width=64))
extras = st.dictionaries(st.text("abcdefgh_", min_size=1, max_size=6).map(lambda k: "x_" + k),
                         json_scalar, max_size=3)


@st.composite
def graphs(draw):
    n_areas = draw(st.integers(1, 6))
    vertices, edges = [], []
    for i in range(n_areas):
        vertices.append(Area(f"#10:{i}", draw(text), draw(st.none() | st.just(f"http://a/{i}")), draw(extras)))
        if i:
            edges.append(Edge(f"#10:{draw(st.integers(0, i - 1))}", f"#10:{i}", "contains"))
    for i in range(draw(st.integers(0, 3))):
        vertices.append(Sensor(f"#11:{i}", draw(text), draw(st.floats(0.5, 3600)), None, draw(extras)))
        vertices.append(Parameter(f"#12:{i}", draw(text), f"http://p/{i}", draw(st.none() | text), draw(extras)))
        edges.append(Edge(f"#11:{i}", f"#12:{i}", "gathers"))
    for i in range(draw(st.integers(0, 4))):
        vertices.append(RuleRecord(f"#25:{i}", "PowerFactorRule", {
            "name": draw(text), "suggestion": draw(text), "powerfactor_uri": "http://p/pf",
            "threshold": draw(st.floats(0, 1)), **draw(extras)}))
        edges.append(Edge(f"#10:{draw(st.integers(0, n_areas - 1))}", f"#25:{i}", HAS_RULE))
    return ResourceGraph(tuple(vertices), tuple(edges))


@settings(max_examples=80, deadline=None)
@given(g=graphs())
def test_round_trip_property(tmp_path_factory, g):
    from recoengine import default_registry
    p = tmp_path_factory.mktemp("rt") / "g.json"
    save_graph(g, p)
    assert load_graph(p, default_registry().schemas) == g
    assert dumps_graph(load_graph(p, default_registry().schemas)) == p.read_text(encoding="utf-8")


@settings(max_examples=150, deadline=None)
@given(doc=st.fixed_dictionaries({}, optional={
    "@rid": st.one_of(st.just("#25:1"), json_scalar),
    "@class": st.sampled_from(["ComfortIndex", "PowerFactorRule", "Area", "Nope", ""]),
    "name": json_scalar, "suggestion": json_scalar, "threshold": json_scalar,
    "temperature_uri": st.sampled_from(["http://a/t", "t", 3]),
    "humidity_uri": st.sampled_from(["http://a/h", "h"]),
    "powerfactor_uri": st.sampled_from(["http://a/pf", ""]),
}))
def test_loader_never_keeps_a_rejected_vertex(doc):
    from recoengine import default_registry
    schemas = default_registry().schemas
    g = parse_graph_document({"vertices": [doc], "edges": []}, schemas)
    if check_schema(doc, schemas):
        assert g.vertices == () and len(g.diagnostics) == 1
    else:
        assert len(g.vertices) == 1 and g.diagnostics == ()
