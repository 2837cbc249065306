"""Reference graphs: a small school with the four kinds of rules wired up."""

from __future__ import annotations

from .model import (
    CONTAINS, COVERS, GATHERS, HAS_RULE, Area, Edge, Parameter, ResourceGraph, RuleRecord, Sensor,
)

TEMP_URI = "http://gaia-x/gw1/temp"
HUMID_URI = "http://gaia-x/gw1/humid"
PF_TEACHING_URI = "http://gaia-x/gw2/powerfactor"
PF_HALL_URI = "http://gaia-x/gw3/powerfactor"
LUX_URI = "http://gaia-x/gw3/luminosity"
POWER_URI = "http://gaia-x/gw3/activepower"


def comfort_index_document() -> dict:
    """The stored form of a ComfortIndex rule instance."""
    return {
        "@rid": "#25:241",
        "@class": "ComfortIndex",
        "name": "CI Room 3",
        "description": "Heat index of the sport block",
        "suggestion": "Open the window",
        "temperature_uri": TEMP_URI,
        "humidity_uri": HUMID_URI,
        "threshold": 32,
    }


def school_graph() -> ResourceGraph:
    """School A: SportBlock and TeachingBlock (Classrooms, Laboratories, Hall).

    PowerFactor rules sit on TeachingBlock and Hall, a luminosity rule on
    Hall, and the ComfortIndex rule on SportBlock.
    """
    areas = [
        Area("#10:0", "School A", "http://gaia-x/areas/school-a",
             {"students": 850, "surface_m2": 5400, "yearly_kwh": 210000}),
        Area("#10:1", "SportBlock", "http://gaia-x/areas/sport-block"),
        Area("#10:2", "TeachingBlock", "http://gaia-x/areas/teaching-block"),
        Area("#10:3", "Classrooms", "http://gaia-x/areas/classrooms"),
        Area("#10:4", "Laboratories", "http://gaia-x/areas/laboratories"),
        Area("#10:5", "Hall", "http://gaia-x/areas/hall"),
    ]
    sensors = [
        Sensor("#11:0", "TH sensor gym", 15, "http://gaia-x/sensors/th-gym"),
        Sensor("#11:1", "Meter teaching", 30, "http://gaia-x/sensors/meter-teaching"),
        Sensor("#11:2", "Meter hall", 30, "http://gaia-x/sensors/meter-hall"),
        Sensor("#11:3", "Lux hall", 15, "http://gaia-x/sensors/lux-hall"),
    ]
    params = [
        Parameter("#12:0", "temperature", TEMP_URI, "C"),
        Parameter("#12:1", "relative humidity", HUMID_URI, "%"),
        Parameter("#12:2", "power factor", PF_TEACHING_URI, ""),
        Parameter("#12:3", "power factor", PF_HALL_URI, ""),
        Parameter("#12:4", "luminosity", LUX_URI, "lx"),
        Parameter("#12:5", "active power", POWER_URI, "W"),
    ]
    ci = comfort_index_document()
    rules = [
        RuleRecord(ci["@rid"], ci["@class"], {k: v for k, v in ci.items() if not k.startswith("@")}),
        RuleRecord("#25:242", "PowerFactorRule", {
            "name": "PF TeachingBlock", "suggestion": "Check reactive loads in the teaching block",
            "powerfactor_uri": PF_TEACHING_URI, "threshold": 0.9, "period": 60}),
        RuleRecord("#25:243", "PowerFactorRule", {
            "name": "PF Hall", "suggestion": "Check reactive loads in the hall",
            "powerfactor_uri": PF_HALL_URI, "threshold": 0.9, "period": 60}),
        RuleRecord("#25:244", "LuminosityRule", {
            "name": "Daylight Hall", "suggestion": "Switch off the lights and use natural light",
            "luminosity_uri": LUX_URI, "active_power_uri": POWER_URI,
            "lux_threshold": 10000, "power_threshold": 500, "period": 60}),
    ]
    edges = [
        Edge("#10:0", "#10:1", CONTAINS), Edge("#10:0", "#10:2", CONTAINS),
        Edge("#10:2", "#10:3", CONTAINS), Edge("#10:2", "#10:4", CONTAINS),
        Edge("#10:2", "#10:5", CONTAINS),
        Edge("#11:0", "#10:1", COVERS), Edge("#11:1", "#10:2", COVERS),
        Edge("#11:2", "#10:5", COVERS), Edge("#11:3", "#10:5", COVERS),
        Edge("#11:0", "#12:0", GATHERS), Edge("#11:0", "#12:1", GATHERS),
        Edge("#11:1", "#12:2", GATHERS), Edge("#11:2", "#12:3", GATHERS),
        Edge("#11:2", "#12:5", GATHERS), Edge("#11:3", "#12:4", GATHERS),
        Edge("#10:1", "#25:241", HAS_RULE),
        Edge("#10:2", "#25:242", HAS_RULE),
        Edge("#10:5", "#25:243", HAS_RULE),
        Edge("#10:5", "#25:244", HAS_RULE),
    ]
    return ResourceGraph(tuple(areas + sensors + params + rules), tuple(edges))
