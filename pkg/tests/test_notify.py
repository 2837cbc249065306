import json
import time

import pytest

from builders import CALM, StaticGateway
from websockets.exceptions import InvalidStatus
from websockets.sync.client import connect

from recoengine.engine import Engine
from recoengine.events import MemoryEventLog, Notification, PublishResult
from recoengine.notify import NotificationHub
from recoengine.samples import HUMID_URI, TEMP_URI

NOTE = Notification("CI Room 3", "Open the window", ("School A", "SportBlock"), 1718100000.0, {"u": 1.0})


def wait_for(pred, timeout=3.0):
    end = time.monotonic() + timeout
    while time.monotonic() < end:
        if pred():
            return True
        time.sleep(0.01)
    return False


@pytest.fixture
def hub():
    with NotificationHub(send_timeout=0.5) as h:
        yield h


def test_two_clients_two_deliveries(hub):
    with connect(hub.url) as a, connect(hub.url) as b:
        assert wait_for(lambda: hub.client_count == 2)
        res = hub.publish(NOTE)
        assert (res.delivered, res.failures) == (2, ())
        for ws in (a, b):
            frame = json.loads(ws.recv(timeout=2))
            assert frame == {"type": "recommendation", "ruleName": "CI Room 3",
                             "suggestion": "Open the window", "areaPath": ["School A", "SportBlock"],
                             "timestamp": "2024-06-11T10:00:00.000Z", "values": {"u": 1.0}}


def test_no_clients(hub):
    assert hub.publish(NOTE) == PublishResult(0, ())


def test_wrong_path_rejected(hub):
    with pytest.raises(InvalidStatus) as ei:
        connect(hub.url.replace("/notifications", "/other"))
    assert ei.value.response.status_code == 404


def test_disconnected_client_is_dropped(hub):
    a = connect(hub.url)
    with connect(hub.url) as b:
        assert wait_for(lambda: hub.client_count == 2)
        a.close()
        assert wait_for(lambda: hub.client_count == 1)
        res = hub.publish(NOTE)
        assert res.delivered == 1
        assert json.loads(b.recv(timeout=2))["ruleName"] == "CI Room 3"


class _HalfClosed:
    """Stands in for a client whose socket died while we were sending."""

    remote_address = ("127.0.0.1", 1)

    async def send(self, frame):
        raise ConnectionResetError("peer went away mid-send")


def test_failing_client_counted_and_logged(hub, school_file):
    with connect(hub.url):
        assert wait_for(lambda: hub.client_count == 1)
        bad = _HalfClosed()
        hub._clients.add(bad)
        log = MemoryEventLog()
        eng = Engine(gateway=StaticGateway({**CALM, TEMP_URI: 30, HUMID_URI: 60}), notifier=hub,
                     events=log, tick=60)
        eng.load(school_file)
        eng.run_tick(now=1.0)
        kinds = [r.kind for r in log.records]
        assert kinds == ["fired", "notify_failed"]
        assert "mid-send" in log.records[1].detail
        assert bad not in hub._clients and hub.client_count == 1


def test_stopped_hub_reports_failure():
    h = NotificationHub().start()
    h.stop()
    res = h.publish(NOTE)
    assert res.delivered == 0 and res.failures


def test_port_in_use():
    with NotificationHub() as a:
        with pytest.raises(OSError):
            NotificationHub(port=a.port).start()
