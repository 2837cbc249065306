#!/usr/bin/env python3
"""Drive the sample school graph through a scripted sensor timeline.

Starts an in-process mock sensor server and a notification hub, connects one
WebSocket subscriber, runs one engine tick per timeline step and prints what
the subscriber receives.

    python scripts/school_demo.py [--log events.ndjson]
"""

import argparse
import json
import tempfile
from pathlib import Path

from websockets.sync.client import connect

from recoengine.builtin import heat_index
from recoengine.engine import Engine
from recoengine.events import EventLog, MemoryEventLog
from recoengine.measurements import MeasurementGateway, MockSensorServer
from recoengine.notify import NotificationHub
from recoengine.samples import (
    HUMID_URI, LUX_URI, PF_HALL_URI, PF_TEACHING_URI, POWER_URI, TEMP_URI, school_graph,
)
from recoengine.store import save_graph

URIS = (TEMP_URI, HUMID_URI, PF_TEACHING_URI, PF_HALL_URI, LUX_URI, POWER_URI)
TIMELINE = [
    ("calm", (20.0, 50.0, 0.95, 0.95, 500.0, 100.0)),
    ("hall power factor drops", (20.0, 50.0, 0.95, 0.82, 500.0, 100.0)),
    ("sunny hall with the lights on", (20.0, 50.0, 0.95, 0.95, 25000.0, 900.0)),
    ("hot and humid gym", (30.0, 60.0, 0.95, 0.95, 500.0, 100.0)),
    ("hot but dry gym", (30.0, 40.0, 0.95, 0.95, 500.0, 100.0)),
]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--log", help="also write the NDJSON event log here")
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        graph = Path(tmp) / "school.json"
        save_graph(school_graph(), graph)
        script = {"/" + u.split("/", 3)[3]: [{"value": row[i]} for _, row in TIMELINE]
                  for i, u in enumerate(URIS)}
        events = EventLog(args.log) if args.log else MemoryEventLog()
        with MockSensorServer(script) as mock, \
                MeasurementGateway(deadline=2.0, base_url=mock.base_url) as gw, \
                NotificationHub() as hub, connect(hub.url) as ws:
            engine = Engine(gateway=gw, notifier=hub, events=events, tick=60)
            engine.load(graph)
            for label, row in TIMELINE:
                t, rh = row[0], row[1]
                report = engine.run_tick()
                print(f"tick {report.tick_id}: {label} (heat index {heat_index(t, rh):.2f} C)")
                for _ in range(report.fired):
                    frame = json.loads(ws.recv(timeout=2))
                    where = " / ".join(frame["areaPath"])
                    print(f"    {frame['ruleName']} [{where}]: {frame['suggestion']}")
                if not report.fired:
                    print("    no recommendation")
        if args.log:
            events.close()


if __name__ == "__main__":
    main()
