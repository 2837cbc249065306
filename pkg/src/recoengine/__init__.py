"""Resource-graph rule engine producing energy-saving recommendations from IoT measurements."""

from .engine import Engine, LoadStats, RuleTree, TickReport, load_and_build, validate_schedule
from .expr import evaluate, free_identifiers, parse, pretty_print
from .measurements import MeasurementCache, MeasurementGateway, MockSensorServer, fetch_all
from .model import ResourceGraph, area_path, validate_graph
from .rules import Rule, RuleRegistry, default_registry, instantiate_rule, register_rule_class
from .store import ClassSchema, FieldSpec, check_schema, load_graph, save_graph

__version__ = "0.1.0"

__all__ = [
    "ClassSchema", "Engine", "FieldSpec", "LoadStats", "MeasurementCache", "MeasurementGateway",
    "MockSensorServer", "ResourceGraph", "Rule", "RuleRegistry", "RuleTree", "TickReport",
    "area_path", "check_schema", "default_registry", "evaluate", "fetch_all", "free_identifiers",
    "instantiate_rule", "load_and_build", "load_graph", "parse", "pretty_print",
    "register_rule_class", "save_graph", "validate_graph", "validate_schedule",
]
