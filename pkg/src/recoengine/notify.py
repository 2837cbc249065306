"""WebSocket broadcast of recommendation notifications.

Clients connect to ``ws://<listen>/notifications`` and receive one JSON text
frame per fired rule. Delivery is best effort; there is no replay for late
joiners.
"""

from __future__ import annotations

import asyncio
import logging
import threading
from concurrent.futures import TimeoutError as FutureTimeout
from http import HTTPStatus

from websockets.asyncio.server import ServerConnection, serve

from .events import Notification, PublishResult

log = logging.getLogger(__name__)

PATH = "/notifications"


class NotificationHub:
    """Runs a WebSocket server on its own event loop thread.

    ``publish`` is called from the engine thread. Each send gets at most
    ``send_timeout`` seconds and the whole broadcast at most
    ``send_timeout + 1``, so a stuck client never stalls a tick for long.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 0, *, path: str = PATH,
                 send_timeout: float = 1.0):
        self.host, self.path = host, path
        self._requested_port = port
        self.send_timeout = send_timeout
        self._clients: set = set()
        self._loop: asyncio.AbstractEventLoop | None = None
        self._server = None
        self._thread: threading.Thread | None = None
        self._ready = threading.Event()
        self._startup_error: BaseException | None = None
        self.port: int | None = None

    @property
    def url(self) -> str:
        return f"ws://{self.host}:{self.port}{self.path}"

    @property
    def client_count(self) -> int:
        return len(self._clients)

    def start(self, timeout: float = 5.0) -> NotificationHub:
        self._thread = threading.Thread(target=self._run, name="ws-hub", daemon=True)
        self._thread.start()
        if not self._ready.wait(timeout):
            raise RuntimeError("notification hub did not start")
        if self._startup_error is not None:
            raise self._startup_error
        return self

    def _run(self) -> None:
        loop = asyncio.new_event_loop()
        self._loop = loop

        async def open_server():
            return await serve(self._handle, self.host, self._requested_port,
                               process_request=self._check_path)

        try:
            self._server = loop.run_until_complete(open_server())
        except BaseException as exc:  # port in use, bad host, ...
            self._startup_error = exc
            self._ready.set()
            loop.close()
            return
        self.port = self._server.sockets[0].getsockname()[1]
        self._ready.set()
        try:
            loop.run_forever()
        finally:
            loop.close()

    def _check_path(self, connection: ServerConnection, request):
        if request.path.split("?", 1)[0] != self.path:
            return connection.respond(HTTPStatus.NOT_FOUND, "unknown path\n")
        return None

    async def _handle(self, ws: ServerConnection) -> None:
        self._clients.add(ws)
        try:
            # Inbound frames are ignored; we only wait for the client to go away.
            async for _ in ws:
                pass
        except Exception:
            pass
        finally:
            self._clients.discard(ws)

    async def _send(self, ws, frame: str) -> str | None:
        try:
            await asyncio.wait_for(ws.send(frame), self.send_timeout)
            return None
        except Exception as exc:
            self._clients.discard(ws)
            return f"client {getattr(ws, 'remote_address', '?')}: {type(exc).__name__}: {exc}"

    async def _broadcast(self, frame: str) -> PublishResult:
        clients = list(self._clients)
        results = await asyncio.gather(*(self._send(ws, frame) for ws in clients))
        failures = tuple(r for r in results if r is not None)
        return PublishResult(len(clients) - len(failures), failures)

    def publish(self, notification: Notification) -> PublishResult:
        if self._loop is None or not self._loop.is_running():
            return PublishResult(0, ("notification hub is not running",))
        fut = asyncio.run_coroutine_threadsafe(self._broadcast(notification.to_frame()), self._loop)
        try:
            return fut.result(self.send_timeout + 1.0)
        except FutureTimeout:
            fut.cancel()
            return PublishResult(0, ("broadcast exceeded its send budget",))

    def stop(self) -> None:
        loop = self._loop
        if loop is None or not loop.is_running():
            return

        async def shutdown():
            self._server.close()
            await self._server.wait_closed()

        try:
            asyncio.run_coroutine_threadsafe(shutdown(), loop).result(5.0)
        except Exception:
            log.debug("hub shutdown", exc_info=True)
        loop.call_soon_threadsafe(loop.stop)
        if self._thread is not None:
            self._thread.join(5.0)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
